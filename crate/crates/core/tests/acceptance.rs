//! Acceptance criteria, one PASS/FAIL line each. Run with
//! `cargo test -p retcomplete-core --test acceptance -- --nocapture`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use retcomplete_core::bench::{csv, run_bench, workload_csv, BenchConfig};
use retcomplete_core::biretnet::{BiRetNet, ModelConfig};
use retcomplete_core::image::{ImageTensor, MaskGrid};
use retcomplete_core::inferencer::{argmax, complete, oracle_distribution, SamplingPolicy};
use retcomplete_core::palette::{fit_kmeans, Palette, Rgb};
use retcomplete_core::retention::{head_gamma, Paradigm, RetentionHeadParams};
use retcomplete_core::rng;
use retcomplete_core::sequencer::{sample_training_mask, PixelSequence};
use retcomplete_core::synthetic::{smooth_images, stripe_grids, STRIPE_K};
use retcomplete_core::tensor::Tensor;
use retcomplete_core::trainer::{masked_loss, mlm_loss, train_loop, TrainConfig, Trainer};
use retcomplete_core::upsampler::{
    bilinear_upscale, composite, masked_l1, toy_samples, train_upsampler, UpsamplerConfig, UpsamplerParams,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Replaces every parameter with uniform noise so predictions are far from uniform.
fn scrambled(cfg: ModelConfig, seed: u64, scale: f64) -> BiRetNet {
    let mut m = BiRetNet::new(cfg, seed).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for id in m.params().ids().collect::<Vec<_>>() {
        for v in m.params_mut().get_mut(id).data_mut() {
            *v = r.random_range(-scale..scale);
        }
    }
    m
}

fn random_seq(cfg: &ModelConfig, r: &mut ChaCha8Rng, p_mask: f64) -> PixelSequence {
    let t = cfg.seq_len();
    let mut mask: Vec<bool> = (0..t).map(|_| r.random_bool(p_mask)).collect();
    let forced = r.random_range(0..t);
    mask[forced] = true;
    PixelSequence::new((0..t).map(|_| r.random_range(0..cfg.k)).collect(), mask, cfg.side).unwrap()
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn ac1_paradigms() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let len = r.random_range(4..=64);
        let dh = 2 * r.random_range(1..=8);
        let head = RetentionHeadParams::random(dh, head_gamma(case % 8), 0.5, &mut r);
        let x = Tensor::from_fn(&[len, dh], |_| r.random_range(-1.0..1.0));
        let par = head.parallel(&x).unwrap();
        let (rec, _) = head.recurrent(&x).unwrap();
        worst = worst.max(par.max_abs_diff(&rec));
        for b in [1, 4, len] {
            worst = worst.max(par.max_abs_diff(&head.chunkwise(&x, b).unwrap()));
        }
    }
    outcome(worst <= 1e-6, format!("max elementwise gap {worst:.2e} over 100 cases (tol 1e-6)"))
}

fn ac2_algorithm_fidelity() -> Outcome {
    let cfg = ModelConfig {
        heads: 2,
        d: 16,
        layers: 2,
        side: 8,
        k: 8,
    };
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut color_mismatch = 0;
    for case in 0..20u64 {
        let m = scrambled(cfg, case, 0.3);
        let seq = random_seq(&cfg, &mut r, 0.4);
        let policy = if case % 2 == 0 {
            SamplingPolicy::Top1
        } else {
            SamplingPolicy::TopK { k: 3, temperature: 1.0 }
        };
        let done = complete(&m, &seq, policy, case).unwrap();
        // replay the sampler on the oracle's distributions
        let mut replay = rng::stream(case, rng::SAMPLING);
        let mut committed = Vec::new();
        for st in &done.steps {
            let oracle = oracle_distribution(&m, &seq, &committed, st.position).unwrap();
            worst = worst.max(max_gap(&oracle, &st.dist));
            if policy.sample(&oracle, &mut replay) != st.color {
                color_mismatch += 1;
            }
            committed.push((st.position, st.color));
        }
    }
    outcome(
        worst <= 1e-4 && color_mismatch == 0,
        format!("20 cases at L=8: max distribution gap {worst:.2e} (tol 1e-4), {color_mismatch} color mismatches"),
    )
}

fn ac3_gradients() -> Outcome {
    let cfg = ModelConfig {
        heads: 2,
        d: 16,
        layers: 2,
        side: 4,
        k: 8,
    };
    let mut trainer = Trainer::new(
        cfg,
        TrainConfig {
            batch: 1,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    trainer.model = scrambled(cfg, 3, 0.3);
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let seq = random_seq(&cfg, &mut r, 0.5);
    let (_, _, grads) = trainer.loss_and_grads(std::slice::from_ref(&seq)).unwrap();
    let ids: Vec<_> = trainer.model.params().ids().collect();
    let h = 1e-5;
    let (mut worst, mut worst_name, mut checked) = (0.0f64, String::new(), 0usize);
    for (gi, &id) in ids.iter().enumerate() {
        for i in 0..trainer.model.params().get(id).numel() {
            let mut eval = |delta: f64| {
                let p = trainer.model.params_mut().get_mut(id);
                let orig = p.data()[i];
                p.data_mut()[i] = orig + delta;
                let l = masked_loss(&trainer.model, &seq, seq.tokens(), Paradigm::Parallel).unwrap();
                trainer.model.params_mut().get_mut(id).data_mut()[i] = orig;
                l
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = grads[gi].data()[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-5);
            if rel > worst {
                worst = rel;
                worst_name = format!("{}[{i}]", trainer.model.params().name(id));
            }
            checked += 1;
        }
    }
    outcome(
        worst < 1e-3,
        format!("{checked} scalars, worst relative error {worst:.2e} at {worst_name} (tol 1e-3)"),
    )
}

fn ac4_training() -> Outcome {
    let cfg = ModelConfig {
        heads: 2,
        d: 32,
        layers: 2,
        side: 8,
        k: STRIPE_K,
    };
    let tcfg = TrainConfig {
        batch: 16,
        lr: 3e-3,
        steps: 200,
        seed: 1,
        ..TrainConfig::default()
    };
    let data = stripe_grids();
    let mut trainer = Trainer::new(cfg, tcfg).unwrap();
    let ln_k = (STRIPE_K as f64).ln();
    let mut r = rng::stream(99, rng::MASKS);
    let eval: Vec<PixelSequence> = data
        .iter()
        .map(|g| PixelSequence::from_grids(g, &sample_training_mask(8, (0.2, 0.7), &mut r)).unwrap())
        .collect();
    let score = |t: &Trainer| {
        let (mut loss, mut hits, mut n) = (0.0, 0, 0);
        for s in &eval {
            let probs = t.model.predict(s, Paradigm::Parallel).unwrap();
            loss += mlm_loss(&probs, s.tokens(), s.mask()).unwrap() / eval.len() as f64;
            for p in s.masked_positions() {
                n += 1;
                hits += usize::from(argmax(probs.row(p)) == s.tokens()[p]);
            }
        }
        (loss, hits as f64 / n as f64)
    };
    let (l0, _) = score(&trainer);
    train_loop(&mut trainer, &data, None, None).unwrap();
    let (l1, acc) = score(&trainer);
    let init_ok = (l0 - ln_k).abs() <= 0.1 * ln_k;
    outcome(
        init_ok && l1 < 0.5 * ln_k && acc > 0.6,
        format!(
            "held-out masks: init loss {l0:.3} (ln 8 = {ln_k:.3}, ±10%), final loss {l1:.3} (< {:.3}), accuracy {:.1}% (> 60%)",
            0.5 * ln_k,
            acc * 100.0
        ),
    )
}

fn ac5_constant_cost() -> Outcome {
    let cfg = ModelConfig {
        side: 32,
        ..ModelConfig::DESK
    };
    let m = BiRetNet::new(cfg, 5).unwrap();
    let run = match run_bench(
        &m,
        &BenchConfig {
            ratios: vec![0.25, 0.75],
            reps: 5,
            warmup: 1,
            baseline_steps: 10,
            seed: 5,
        },
    ) {
        Ok(run) => run,
        Err(e) => return outcome(false, format!("bench failed: {e}")),
    };
    let med = |method: &str, ratio: f64| {
        run.rows
            .iter()
            .find(|r| r.method == method && r.mask_ratio == ratio)
            .unwrap()
            .median_ms
    };
    let rec = med("recurrent", 0.75) / med("recurrent", 0.25);
    let base = med("recompute", 0.75) / med("recompute", 0.25);
    outcome(
        rec <= 1.3 && base >= 2.0,
        format!("L=32 d=64 N=4: recurrent per-pixel 0.75/0.25 = {rec:.2} (≤ 1.3), recompute = {base:.2} (≥ 2)"),
    )
}

fn ac6_no_leakage() -> Outcome {
    let cfg = ModelConfig {
        heads: 2,
        d: 16,
        layers: 2,
        side: 6,
        k: 6,
    };
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let mut violations = 0;
    let cases = 30;
    for case in 0..cases {
        let m = scrambled(cfg, 100 + case, 0.3);
        let seq = random_seq(&cfg, &mut r, 0.4);
        let mut tokens = seq.tokens().to_vec();
        for p in seq.masked_positions() {
            tokens[p] = (tokens[p] + r.random_range(1..cfg.k)) % cfg.k;
        }
        let changed = seq.with_tokens(tokens).unwrap();
        let la = masked_loss(&m, &seq, seq.tokens(), Paradigm::Parallel).unwrap();
        let lb = masked_loss(&m, &changed, seq.tokens(), Paradigm::Chunkwise(5)).unwrap();
        let lc = masked_loss(&m, &changed, seq.tokens(), Paradigm::Parallel).unwrap();
        let policy = SamplingPolicy::TopK { k: 4, temperature: 0.8 };
        let ca = complete(&m, &seq, policy, case).unwrap();
        let cb = complete(&m, &changed, policy, case).unwrap();
        if la != lc || ca != cb || (la - lb).abs() > 1e-9 {
            violations += 1;
        }
    }
    outcome(violations == 0, format!("{cases} cases, {violations} with any change in loss or completion"))
}

fn ac7_preservation() -> Outcome {
    let cfg = ModelConfig {
        heads: 2,
        d: 16,
        layers: 1,
        side: 8,
        k: 5,
    };
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let mut token_changes = 0;
    for case in 0..10 {
        let m = scrambled(cfg, 200 + case, 0.3);
        let seq = random_seq(&cfg, &mut r, 0.5);
        let out = complete(&m, &seq, SamplingPolicy::TopK { k: 5, temperature: 2.0 }, case).unwrap();
        token_changes += (0..seq.len())
            .filter(|&p| !seq.mask()[p] && out.grid.data()[p] != seq.tokens()[p])
            .count();
    }
    let mut net = UpsamplerParams::new(
        UpsamplerConfig {
            widths: [8, 16],
            blocks: 2,
            groups: 4,
        },
        7,
    )
    .unwrap();
    for id in net.params().ids().collect::<Vec<_>>() {
        for v in net.params_mut().get_mut(id).data_mut() {
            *v += r.random_range(-0.2..0.2);
        }
    }
    let mut pixel_changes = 0;
    for img in &smooth_images(4, 16, 16, 7) {
        let mask = sample_training_mask(16, (0.2, 0.6), &mut r);
        let low = ImageTensor::from_fn(4, 4, 3, |_, _, _| r.random());
        let up = bilinear_upscale(&low, 16, 16).unwrap();
        let out = net.refine(&up, img, &mask).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                if !*mask.get(y, x) && out.pixel(y, x) != img.pixel(y, x) {
                    pixel_changes += 1;
                }
            }
        }
    }
    outcome(
        token_changes == 0 && pixel_changes == 0,
        format!("{token_changes} unmasked tokens altered, {pixel_changes} unmasked full-res pixels altered"),
    )
}

fn ac8_palette() -> Outcome {
    // dyadic values keep every distance exact, so ties are real ties
    let centroids: Vec<Rgb> = vec![
        [0.25, 0.25, 0.25],
        [0.75, 0.25, 0.25],
        [0.25, 0.75, 0.25],
        [0.25, 0.25, 0.75],
        [0.75, 0.75, 0.75],
        [0.5, 0.5, 0.5],
    ];
    let pal = Palette::new(centroids).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let img = ImageTensor::from_fn(100, 100, 3, |_, _, _| {
        if r.random_bool(0.5) {
            r.random_range(0..=8) as f64 / 8.0
        } else {
            r.random()
        }
    });
    let got = pal.quantize(&img).unwrap();
    let (mut mismatches, mut ties) = (0, 0);
    for (i, px) in img.pixels().enumerate() {
        let d: Vec<f64> = pal
            .centroids()
            .iter()
            .map(|c| (0..3).map(|ch| (px[ch] - c[ch]).powi(2)).sum())
            .collect();
        let best = d.iter().cloned().fold(f64::INFINITY, f64::min);
        let first = d.iter().position(|&v| v == best).unwrap();
        ties += usize::from(d.iter().filter(|&&v| v == best).count() > 1);
        mismatches += usize::from(got.data()[i] != first);
    }
    let pixels: Vec<Rgb> = smooth_images(3, 24, 24, 8)
        .iter()
        .flat_map(|im| im.pixels().map(|p| [p[0], p[1], p[2]]).collect::<Vec<_>>())
        .collect();
    let fit = fit_kmeans(&pixels, 12, 40, 8).unwrap();
    let increases = fit.inertia.windows(2).filter(|w| w[1] > w[0]).count();
    outcome(
        mismatches == 0 && ties > 0 && increases == 0,
        format!(
            "10000 pixels ({ties} ties): {mismatches} mismatches vs brute force; k-means inertia increased {increases} times over {} iterations",
            fit.inertia.len()
        ),
    )
}

fn ac9_determinism() -> Outcome {
    let pixels: Vec<Rgb> = smooth_images(2, 16, 16, 9)
        .iter()
        .flat_map(|im| im.pixels().map(|p| [p[0], p[1], p[2]]).collect::<Vec<_>>())
        .collect();
    let palettes = [0, 1].map(|_| fit_kmeans(&pixels, 8, 20, 9).unwrap().palette.to_bytes());
    let cfg = ModelConfig {
        heads: 2,
        d: 8,
        layers: 1,
        side: 8,
        k: 8,
    };
    let ckpts = [0, 1].map(|_| {
        let mut t = Trainer::new(
            cfg,
            TrainConfig {
                batch: 2,
                steps: 5,
                seed: 9,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        train_loop(&mut t, &stripe_grids(), None, None).unwrap();
        t.to_checkpoint(None).to_bytes().unwrap()
    });
    let m = scrambled(cfg, 9, 0.3);
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let seq = random_seq(&cfg, &mut r, 0.5);
    let policy = SamplingPolicy::TopK { k: 4, temperature: 1.0 };
    let completions = [0, 1].map(|_| complete(&m, &seq, policy, 9).unwrap());
    let bcfg = BenchConfig {
        ratios: vec![0.0, 0.3, 0.6],
        reps: 5,
        warmup: 0,
        baseline_steps: 4,
        seed: 9,
    };
    let strip = |s: String| s.lines().map(|l| l.split(',').take(2).collect::<Vec<_>>().join(",")).collect::<Vec<_>>();
    let benches = [0, 1].map(|_| run_bench(&m, &bcfg));
    let bench_ok = match &benches {
        [Ok(a), Ok(b)] => workload_csv(&a.workloads) == workload_csv(&b.workloads) && strip(csv(&a.rows)) == strip(csv(&b.rows)),
        _ => false,
    };
    let checks = [
        ("palettes", palettes[0] == palettes[1]),
        ("checkpoints", ckpts[0] == ckpts[1]),
        ("completions", completions[0] == completions[1]),
        ("bench workload + CSV keys", bench_ok),
    ];
    let failed: Vec<_> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    outcome(
        failed.is_empty(),
        if failed.is_empty() {
            "palettes, checkpoints, completions and bench outputs identical across two runs".to_string()
        } else {
            format!("differs: {}", failed.join(", "))
        },
    )
}

fn ac10_upsampler() -> Outcome {
    let images = smooth_images(9, 16, 16, 5);
    let data = toy_samples(&images[..8], 4).unwrap();
    let mut net = UpsamplerParams::new(
        UpsamplerConfig {
            widths: [8, 16],
            blocks: 2,
            groups: 4,
        },
        2,
    )
    .unwrap();
    let cfg = TrainConfig {
        batch: 4,
        lr: 3e-3,
        steps: 300,
        mask_ratio: (0.2, 0.5),
        seed: 2,
        ..TrainConfig::default()
    };
    train_upsampler(&mut net, &data, &cfg).unwrap();
    let held = toy_samples(&images[8..], 4).unwrap().remove(0);
    let mask = MaskGrid::from_fn(16, 16, |r, c| (4..12).contains(&r) && (3..11).contains(&c));
    let up = bilinear_upscale(&held.low, 16, 16).unwrap();
    let base = masked_l1(&composite(&up, &held.truth, &mask), &held.truth, &mask);
    let ours = masked_l1(&net.refine(&up, &held.truth, &mask).unwrap(), &held.truth, &mask);
    outcome(ours < base, format!("held-out masked L1: refined {ours:.4} vs bilinear {base:.4}"))
}

type Criterion = (&'static str, fn() -> Outcome);

#[test]
fn acceptance() {
    let criteria: [Criterion; 10] = [
        ("AC1 paradigm equivalence", ac1_paradigms),
        ("AC2 pixel-wise inference fidelity", ac2_algorithm_fidelity),
        ("AC3 gradient correctness", ac3_gradients),
        ("AC4 training sanity", ac4_training),
        ("AC5 constant-cost decoding", ac5_constant_cost),
        ("AC6 masking semantics", ac6_no_leakage),
        ("AC7 unmasked preservation", ac7_preservation),
        ("AC8 palette correctness", ac8_palette),
        ("AC9 determinism", ac9_determinism),
        ("AC10 upsampler value", ac10_upsampler),
    ];
    let mut failed = Vec::new();
    for (name, run) in criteria {
        let t0 = Instant::now();
        let o = run();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("{verdict} {name}: {} [{:.1}s]", o.detail, t0.elapsed().as_secs_f64());
        if !o.pass {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
