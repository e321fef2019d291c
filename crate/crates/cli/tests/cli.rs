use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use retcomplete_core::image::{load_image, save_image, save_mask};
use retcomplete_core::synthetic::stripe_images;
use retcomplete_core::MaskGrid;

fn retcomplete(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_retcomplete"))
        .args(args)
        .env("RETCOMPLETE_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_lists_every_subcommand() {
    let o = retcomplete(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["build-palette", "train", "complete", "upsample", "bench"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn missing_checkpoint_is_runtime_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("absent.rckpt");
    let out = dir.path().join("out.ppm");
    let o = retcomplete(&["complete", "--ckpt", p(&ckpt), "--image", "x.ppm", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("error[io]: "), "{err}");
    assert!(err.contains("absent.rckpt"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn unknown_flag_is_usage_error() {
    let o = retcomplete(&["bench", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    let o = retcomplete(&["complete", "--ckpt", "a", "--image", "b", "--out", "c", "--policy", "top9"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn too_few_bench_reps_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = retcomplete(&["bench", "--reps", "3", "--side", "4", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error[usage]: "));
}

#[test]
fn full_pipeline_on_toy_data() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    fs::create_dir(&data).unwrap();
    for (i, img) in stripe_images(1).iter().enumerate().step_by(2) {
        save_image(img, data.join(format!("s{i:02}.ppm"))).unwrap();
    }
    let palette = d.join("pal.bin");
    let o = retcomplete(&["build-palette", "--corpus", p(&data), "--k", "8", "--out", p(&palette)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let config = d.join("run.cfg");
    fs::write(
        &config,
        "model.heads = 2\nmodel.d = 8\nmodel.layers = 1\nmodel.side = 8\nmodel.k = 8\n\
         train.batch = 2\ntrain.steps = 3\n\
         upsampler.widths = 4, 8\nupsampler.blocks = 1\nupsampler.groups = 2\n",
    )
    .unwrap();
    let run = d.join("run");
    let o = retcomplete(&[
        "train", "--config", p(&config), "--data", p(&data), "--palette", p(&palette), "--out", p(&run),
        "--seed", "4", "--upsampler",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("step,loss,acc,ms_per_step"));
    assert_eq!(metrics.lines().count(), 4);

    let image = data.join("s00.ppm");
    let mask = d.join("mask.pgm");
    save_mask(&MaskGrid::from_fn(8, 8, |r, c| (2..6).contains(&r) && c > 3), &mask).unwrap();
    let low = d.join("low.ppm");
    let entropy = d.join("entropy.pgm");
    let ckpt = run.join("model.rckpt");
    let complete = |out: &Path| {
        retcomplete(&[
            "complete", "--ckpt", p(&ckpt), "--image", p(&image), "--mask", p(&mask), "--policy", "topk:3:1",
            "--seed", "7", "--out", p(out), "--entropy", p(&entropy),
        ])
    };
    let o = complete(&low);
    assert!(o.status.success(), "{}", stderr(&o));
    let again = d.join("low2.ppm");
    complete(&again);
    assert_eq!(fs::read(&low).unwrap(), fs::read(&again).unwrap());
    let completed = load_image(&low).unwrap();
    let original = load_image(&image).unwrap();
    assert_eq!(completed.pixel(0, 0), original.pixel(0, 0));
    assert_eq!(load_image(&entropy).unwrap().height(), 8);

    let up = d.join("up.png");
    let o = retcomplete(&[
        "upsample", "--ckpt", p(&run.join("upsampler.rckpt")), "--low", p(&low), "--orig", p(&image), "--mask",
        p(&mask), "--out", p(&up),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(load_image(&up).unwrap().height(), 8);

    let bench = d.join("bench");
    let o = retcomplete(&[
        "bench", "--ckpt", p(&ckpt), "--ratios", "0,0.5", "--reps", "5", "--warmup", "0", "--baseline-steps", "3",
        "--out", p(&bench),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(bench.join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(bench.join("bench.dat").exists());
}
