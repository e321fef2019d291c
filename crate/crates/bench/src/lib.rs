//! Fixtures shared by the criterion benchmarks.

use retcomplete_core::sequencer::{gen_mask, MaskKind, MaskSpec};
use retcomplete_core::{BiRetNet, ModelConfig, PixelSequence};

/// Desk-scale model at side `side`, randomly initialized.
pub fn desk_model(side: usize) -> BiRetNet {
    BiRetNet::new(ModelConfig { side, ..ModelConfig::DESK }, 0).expect("valid preset")
}

/// Striped token image with a random-rectangle mask covering `ratio`.
pub fn masked_sequence(model: &BiRetNet, ratio: f64) -> PixelSequence {
    let cfg = model.config();
    let tokens = (0..cfg.seq_len()).map(|i| (i * 7 + i / cfg.side) % cfg.k).collect();
    let mask = gen_mask(&MaskSpec::new(MaskKind::RandomRect, ratio, 1), cfg.side).expect("valid ratio");
    PixelSequence::new(tokens, mask.into_data(), cfg.side).expect("matching sizes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_mask_ratio_is_exact() {
        let m = desk_model(8);
        assert_eq!(masked_sequence(&m, 0.25).num_masked(), 16);
    }
}
