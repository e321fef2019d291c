use retcomplete_core::image::MaskGrid;
use retcomplete_core::synthetic::smooth_images;
use retcomplete_core::trainer::TrainConfig;
use retcomplete_core::upsampler::{
    bilinear_upscale, composite, masked_l1, toy_samples, train_upsampler, UpsampleSample, UpsamplerConfig,
    UpsamplerParams,
};

const MICRO: UpsamplerConfig = UpsamplerConfig {
    widths: [8, 16],
    blocks: 2,
    groups: 4,
};

#[test]
fn identity_fit_without_mask() {
    let data = toy_samples(&smooth_images(8, 16, 16, 3), 8).unwrap();
    let mut net = UpsamplerParams::new(MICRO, 1).unwrap();
    let cfg = TrainConfig {
        batch: 4,
        lr: 3e-3,
        steps: 150,
        mask_ratio: (0.0, 0.0),
        seed: 1,
        ..TrainConfig::default()
    };
    let m = train_upsampler(&mut net, &data, &cfg).unwrap();
    let tail: f64 = m[m.len() - 10..].iter().map(|x| x.loss).sum::<f64>() / 10.0;
    eprintln!("first {} tail {tail}", m[0].loss);
    assert!(tail < 0.02, "{tail}");
}

#[test]
fn refinement_beats_bilinear_on_held_out_image() {
    let images = smooth_images(9, 16, 16, 5);
    let data = toy_samples(&images[..8], 4).unwrap();
    let mut net = UpsamplerParams::new(MICRO, 2).unwrap();
    let cfg = TrainConfig {
        batch: 4,
        lr: 3e-3,
        steps: 300,
        mask_ratio: (0.2, 0.5),
        seed: 2,
        ..TrainConfig::default()
    };
    train_upsampler(&mut net, &data, &cfg).unwrap();
    let held: UpsampleSample = toy_samples(&images[8..], 4).unwrap().remove(0);
    let mask = MaskGrid::from_fn(16, 16, |r, c| (4..12).contains(&r) && (3..11).contains(&c));
    let up = bilinear_upscale(&held.low, 16, 16).unwrap();
    let refined = net.refine(&up, &held.truth, &mask).unwrap();
    let base = masked_l1(&composite(&up, &held.truth, &mask), &held.truth, &mask);
    let ours = masked_l1(&refined, &held.truth, &mask);
    eprintln!("bilinear {base} refined {ours}");
    assert!(ours < base);
}
