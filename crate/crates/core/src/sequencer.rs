//! Image → token sequence: area downsampling, palette projection, raster
//! scan, masks, and the input embedding.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::{Grid, ImageTensor, IndexGrid, MaskGrid};
use crate::palette::Palette;
use crate::params::{truncated_normal, ParamId, ParamSet};
use crate::rng;
use crate::tensor::Tensor;

/// Source samples and weights of each output cell for area resampling of
/// `n` samples down to `m`.
fn box_weights(n: usize, m: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n as f64 / m as f64;
    (0..m)
        .map(|i| {
            let (lo, hi) = (i as f64 * scale, (i + 1) as f64 * scale);
            let mut taps = Vec::new();
            let mut j = lo.floor() as usize;
            while (j as f64) < hi && j < n {
                let overlap = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((j, overlap / scale));
                }
                j += 1;
            }
            taps
        })
        .collect()
}

/// Area-average resampling to `side × side`.
pub fn downsample(img: &ImageTensor, side: usize) -> Result<ImageTensor> {
    if side == 0 || side > img.height() || side > img.width() {
        return Err(Error::usage(format!(
            "cannot downsample {}×{} to {side}×{side}",
            img.height(),
            img.width()
        )));
    }
    let rows = box_weights(img.height(), side);
    let cols = box_weights(img.width(), side);
    Ok(ImageTensor::from_fn(side, side, img.channels(), |r, c, ch| {
        let mut acc = 0.0;
        for &(y, wy) in &rows[r] {
            for &(x, wx) in &cols[c] {
                acc += wy * wx * img.get(y, x, ch);
            }
        }
        acc
    }))
}

/// Raster-ordered tokens and mask of a `side × side` grid; position `p` is
/// pixel `(p / side, p % side)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PixelSequence {
    tokens: Vec<usize>,
    mask: Vec<bool>,
    side: usize,
}

impl PixelSequence {
    pub fn new(tokens: Vec<usize>, mask: Vec<bool>, side: usize) -> Result<Self> {
        if side == 0 || tokens.len() != side * side || mask.len() != side * side {
            return Err(Error::dim(format!(
                "{} tokens and {} mask bits for side {side}",
                tokens.len(),
                mask.len()
            )));
        }
        Ok(Self { tokens, mask, side })
    }

    pub fn from_grids(tokens: &IndexGrid, mask: &MaskGrid) -> Result<Self> {
        if tokens.height() != tokens.width() || mask.height() != tokens.height() || mask.width() != tokens.width() {
            return Err(Error::dim("token and mask grids must be equal squares"));
        }
        Self::new(tokens.data().to_vec(), mask.data().to_vec(), tokens.height())
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Masked positions in raster order.
    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&p| self.mask[p]).collect()
    }

    pub fn num_masked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn token_grid(&self) -> IndexGrid {
        Grid::new(self.side, self.side, self.tokens.clone()).expect("square")
    }

    pub fn mask_grid(&self) -> MaskGrid {
        Grid::new(self.side, self.side, self.mask.clone()).expect("square")
    }

    pub fn with_tokens(&self, tokens: Vec<usize>) -> Result<Self> {
        Self::new(tokens, self.mask.clone(), self.side)
    }

    pub fn with_mask(&self, mask: Vec<bool>) -> Result<Self> {
        Self::new(self.tokens.clone(), mask, self.side)
    }
}

/// Quantizes a low-resolution image and pairs it with a mask.
pub fn to_sequence(img_low: &ImageTensor, palette: &Palette, mask: &MaskGrid) -> Result<PixelSequence> {
    PixelSequence::from_grids(&palette.quantize(img_low)?, mask)
}

/// Color table `FE` (`k + 1` rows, the last being the mask token) and
/// position table `PE` (`side²` rows).
#[derive(Debug, Clone)]
pub struct Embedding {
    fe: ParamId,
    pe: ParamId,
    k: usize,
    len: usize,
    d: usize,
}

impl Embedding {
    pub fn new(set: &mut ParamSet, k: usize, d: usize, len: usize, rng: &mut impl Rng) -> Self {
        Self {
            fe: set.add("emb.fe", truncated_normal(&[k + 1, d], 0.02, rng)),
            pe: set.add("emb.pe", truncated_normal(&[len, d], 0.02, rng)),
            k,
            len,
            d,
        }
    }

    pub fn mask_row(&self) -> usize {
        self.k
    }

    pub fn features(&self) -> ParamId {
        self.fe
    }

    pub fn positions(&self) -> ParamId {
        self.pe
    }

    fn rows(&self, seq: &PixelSequence) -> Result<Vec<usize>> {
        if seq.len() != self.len {
            return Err(Error::dim(format!(
                "sequence of {} tokens, embedding expects {}",
                seq.len(),
                self.len
            )));
        }
        seq.tokens()
            .iter()
            .zip(seq.mask())
            .map(|(&t, &m)| match (m, t < self.k) {
                (true, _) => Ok(self.k),
                (false, true) => Ok(t),
                (false, false) => Err(Error::Vocabulary(format!("token {t} outside palette of {}", self.k))),
            })
            .collect()
    }

    /// `FE[token or mask row] + PE[position]` for every position.
    pub fn forward<'g>(&self, g: &'g Graph, set: &ParamSet, seq: &PixelSequence) -> Result<Var<'g>> {
        let rows = self.rows(seq)?;
        g.param(set, self.fe).gather_rows(&rows)?.add(g.param(set, self.pe))
    }

    pub fn value(&self, set: &ParamSet, seq: &PixelSequence) -> Result<Tensor> {
        let g = Graph::no_grad();
        Ok((*self.forward(&g, set, seq)?.value()).clone())
    }

    /// `FE[color] + PE[pos]` for a single token.
    pub fn token(&self, set: &ParamSet, color: usize, pos: usize) -> Vec<f64> {
        let (fe, pe) = (set.get(self.fe), set.get(self.pe));
        fe.row(color).iter().zip(pe.row(pos)).map(|(a, b)| a + b).collect()
    }

    pub fn dim(&self) -> usize {
        self.d
    }
}

/// Kind of evaluation or training mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    /// Central square of side `region`.
    Center,
    /// One random half of the grid.
    Half,
    /// Everything outside the central square.
    Expand,
    /// Thick or thin random brush strokes until `ratio` is covered.
    RandomStroke,
    /// Random rectangles until `ratio` is covered.
    RandomRect,
}

impl MaskKind {
    pub const ALL: [MaskKind; 5] = [
        MaskKind::Center,
        MaskKind::Half,
        MaskKind::Expand,
        MaskKind::RandomStroke,
        MaskKind::RandomRect,
    ];
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskKind::Center => "center",
            MaskKind::Half => "half",
            MaskKind::Expand => "expand",
            MaskKind::RandomStroke => "random_stroke",
            MaskKind::RandomRect => "random_rect",
        })
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MaskKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::usage(format!("unknown mask kind {s:?}")))
    }
}

/// Parameters of a generated mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub kind: MaskKind,
    /// Covered fraction for the random kinds.
    pub ratio: f64,
    /// Side of the central square for `center`/`expand`; `None` means half the grid.
    pub region: Option<usize>,
    pub seed: u64,
}

impl MaskSpec {
    pub fn new(kind: MaskKind, ratio: f64, seed: u64) -> Self {
        Self {
            kind,
            ratio,
            region: None,
            seed,
        }
    }
}

/// Builds a `side × side` mask; deterministic given `spec.seed`.
pub fn gen_mask(spec: &MaskSpec, side: usize) -> Result<MaskGrid> {
    if side == 0 {
        return Err(Error::usage("mask side must be positive"));
    }
    let mut rng = rng::stream(spec.seed, rng::MASKS);
    match spec.kind {
        MaskKind::Center | MaskKind::Expand => {
            let s = spec.region.unwrap_or(side / 2);
            if s == 0 || s > side {
                return Err(Error::usage(format!("center region {s} outside 1..={side}")));
            }
            let lo = (side - s) / 2;
            let inside = |v: usize| (lo..lo + s).contains(&v);
            let center = Grid::from_fn(side, side, |r, c| inside(r) && inside(c));
            Ok(if spec.kind == MaskKind::Center { center } else { center.not() })
        }
        MaskKind::Half => {
            let h = side.div_ceil(2);
            let which = rng.random_range(0..4);
            Ok(Grid::from_fn(side, side, |r, c| match which {
                0 => r < h,
                1 => r >= side - h,
                2 => c < h,
                _ => c >= side - h,
            }))
        }
        MaskKind::RandomStroke | MaskKind::RandomRect => {
            if !(0.0..=1.0).contains(&spec.ratio) {
                return Err(Error::usage(format!("mask ratio {} outside [0, 1]", spec.ratio)));
            }
            let target = (spec.ratio * (side * side) as f64).round() as usize;
            let mut painter = Painter::new(side, target);
            if spec.kind == MaskKind::RandomStroke {
                painter.strokes(&mut rng);
            } else {
                painter.rects(&mut rng);
            }
            Ok(painter.mask)
        }
    }
}

/// Paints pixels one at a time and stops at exactly `target`.
struct Painter {
    mask: MaskGrid,
    side: usize,
    count: usize,
    target: usize,
}

impl Painter {
    fn new(side: usize, target: usize) -> Self {
        Self {
            mask: Grid::filled(side, side, false),
            side,
            count: 0,
            target,
        }
    }

    fn done(&self) -> bool {
        self.count >= self.target
    }

    fn paint(&mut self, r: isize, c: isize) {
        let n = self.side as isize;
        if self.done() || r < 0 || c < 0 || r >= n || c >= n {
            return;
        }
        let (r, c) = (r as usize, c as usize);
        if !*self.mask.get(r, c) {
            self.mask.set(r, c, true);
            self.count += 1;
        }
    }

    fn disk(&mut self, y: f64, x: f64, radius: f64) {
        let ri = radius.ceil() as isize;
        let (cy, cx) = (y.round() as isize, x.round() as isize);
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                if ((dy * dy + dx * dx) as f64) <= radius * radius {
                    self.paint(cy + dy, cx + dx);
                }
            }
        }
    }

    fn strokes(&mut self, rng: &mut impl Rng) {
        let n = self.side as f64;
        let max_radius = (n / 10.0).max(1.0);
        while !self.done() {
            // thin (narrow) and thick (wide) strokes are equally likely
            let radius = if rng.random_bool(0.5) {
                rng.random_range(0.0..=max_radius * 0.5)
            } else {
                rng.random_range(max_radius * 0.5..=max_radius)
            };
            let (mut y, mut x) = (rng.random_range(0.0..n), rng.random_range(0.0..n));
            let mut angle = rng.random_range(0.0..std::f64::consts::TAU);
            for _ in 0..rng.random_range(4..=10) {
                angle += rng.random_range(-1.2..1.2);
                let len = rng.random_range(n / 8.0..=n / 3.0).max(1.0);
                let steps = (len * 2.0).ceil() as usize;
                for s in 0..=steps {
                    let t = len * s as f64 / steps as f64;
                    self.disk(y + t * angle.sin(), x + t * angle.cos(), radius);
                }
                y = (y + len * angle.sin()).clamp(0.0, n - 1.0);
                x = (x + len * angle.cos()).clamp(0.0, n - 1.0);
                if self.done() {
                    return;
                }
            }
        }
    }

    fn rects(&mut self, rng: &mut impl Rng) {
        let n = self.side;
        let max = (n / 2).max(1);
        while !self.done() {
            let (h, w) = (rng.random_range(1..=max), rng.random_range(1..=max));
            let (r0, c0) = (rng.random_range(0..=n - h), rng.random_range(0..=n - w));
            for r in r0..r0 + h {
                for c in c0..c0 + w {
                    self.paint(r as isize, c as isize);
                }
            }
        }
    }
}

/// Random training mask: ratio uniform in `range`, stroke or rectangle.
pub fn sample_training_mask(side: usize, range: (f64, f64), rng: &mut impl Rng) -> MaskGrid {
    let ratio = if range.1 > range.0 {
        rng.random_range(range.0..range.1)
    } else {
        range.0
    };
    let kind = if rng.random_bool(0.5) {
        MaskKind::RandomStroke
    } else {
        MaskKind::RandomRect
    };
    let mut mask = gen_mask(&MaskSpec::new(kind, ratio, rng.random()), side).expect("valid ratio");
    // the loss needs at least one target
    if mask.count() == 0 {
        let p = rng.random_range(0..side * side);
        mask.data_mut()[p] = true;
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_image_stays_constant() {
        let img = ImageTensor::filled(256, 256, &[0.5, 0.5, 0.5]);
        let low = downsample(&img, 16).unwrap();
        assert!(low.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
        let odd = downsample(&ImageTensor::filled(7, 5, &[0.3, 0.2, 0.1]), 3).unwrap();
        assert!(odd.pixels().all(|p| (p[0] - 0.3).abs() < 1e-12 && (p[2] - 0.1).abs() < 1e-12));
    }

    #[test]
    fn checkerboard_to_single_pixel_is_mean() {
        let img = ImageTensor::from_fn(2, 2, 1, |r, c, _| ((r + c) % 2) as f64);
        assert_eq!(downsample(&img, 1).unwrap().data(), &[0.5]);
    }

    #[test]
    fn gradient_matches_block_means() {
        let img = ImageTensor::from_fn(8, 8, 1, |r, c, _| (r * 8 + c) as f64 / 63.0);
        let low = downsample(&img, 4).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let mean = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|(dy, dx)| img.get(2 * r + dy, 2 * c + dx, 0))
                    .sum::<f64>()
                    / 4.0;
                assert!((low.get(r, c, 0) - mean).abs() < 1e-12);
            }
        }
        assert!(matches!(downsample(&img, 9), Err(Error::Usage(_))));
    }

    #[test]
    fn raster_order() {
        let pal = Palette::new(vec![[0.0; 3], [0.3; 3], [0.6; 3], [1.0; 3]]).unwrap();
        let grid = Grid::new(2, 2, vec![3, 1, 0, 2]).unwrap();
        let img = pal.dequantize(&grid).unwrap();
        let seq = to_sequence(&img, &pal, &Grid::filled(2, 2, false)).unwrap();
        assert_eq!(seq.tokens(), &[3, 1, 0, 2]);
        assert!(seq.mask().iter().all(|&m| !m));
    }

    #[test]
    fn random_grid_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tokens = Grid::from_fn(4, 4, |_, _| rng.random_range(0..9));
        let mask = Grid::from_fn(4, 4, |_, _| rng.random_bool(0.5));
        let seq = PixelSequence::from_grids(&tokens, &mask).unwrap();
        for p in 0..16 {
            assert_eq!(seq.tokens()[p], *tokens.get(p / 4, p % 4));
            assert_eq!(seq.mask()[p], *mask.get(p / 4, p % 4));
        }
        assert_eq!(seq.token_grid(), tokens);
        assert_eq!(seq.mask_grid(), mask);
    }

    fn embedding() -> (ParamSet, Embedding) {
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let emb = Embedding::new(&mut set, 5, 3, 4, &mut rng);
        (set, emb)
    }

    #[test]
    fn fully_masked_rows_use_mask_embedding() {
        let (set, emb) = embedding();
        let seq = PixelSequence::new(vec![1, 2, 3, 4], vec![true; 4], 2).unwrap();
        let x = emb.value(&set, &seq).unwrap();
        for p in 0..4 {
            assert_eq!(x.row(p), emb.token(&set, emb.mask_row(), p).as_slice());
        }
    }

    #[test]
    fn zero_positions_leave_only_tokens() {
        let (mut set, emb) = embedding();
        *set.get_mut(emb.positions()) = Tensor::zeros(&[4, 3]);
        let seq = PixelSequence::new(vec![2, 2, 0, 2], vec![false; 4], 2).unwrap();
        let x = emb.value(&set, &seq).unwrap();
        assert_eq!(x.row(0), x.row(1));
        assert_eq!(x.row(0), set.get(emb.features()).row(2));
    }

    #[test]
    fn masked_and_unmasked_rows_differ_by_feature_rows() {
        let (set, emb) = embedding();
        let a = PixelSequence::new(vec![1, 3, 0, 0], vec![false, true, false, false], 2).unwrap();
        let x = emb.value(&set, &a).unwrap();
        let fe = set.get(emb.features());
        let pe = set.get(emb.positions());
        for j in 0..3 {
            assert_eq!(x.row(0)[j] - pe.row(0)[j], fe.row(1)[j]);
            assert_eq!(x.row(1)[j], fe.row(5)[j] + pe.row(1)[j]);
        }
        assert!(matches!(
            emb.value(&set, &PixelSequence::new(vec![5, 0, 0, 0], vec![false; 4], 2).unwrap()),
            Err(Error::Vocabulary(_))
        ));
    }

    #[test]
    fn center_and_expand() {
        let spec = MaskSpec {
            kind: MaskKind::Center,
            ratio: 0.0,
            region: Some(16),
            seed: 0,
        };
        let center = gen_mask(&spec, 32).unwrap();
        assert_eq!(center.count(), 256);
        assert!(*center.get(8, 8) && *center.get(23, 23) && !*center.get(7, 8) && !*center.get(24, 23));
        let expand = gen_mask(&MaskSpec { kind: MaskKind::Expand, ..spec.clone() }, 32).unwrap();
        assert_eq!(expand, center.not());
        assert!(gen_mask(&MaskSpec { region: Some(33), ..spec }, 32).is_err());
    }

    #[test]
    fn half_covers_a_half_plane() {
        for seed in 0..8 {
            let m = gen_mask(&MaskSpec::new(MaskKind::Half, 0.0, seed), 8).unwrap();
            assert_eq!(m.count(), 32);
            let rows = (0..8).all(|r| (0..8).all(|c| m.get(r, c) == m.get(r, 0)));
            let cols = (0..8).all(|c| (0..8).all(|r| m.get(r, c) == m.get(0, c)));
            assert!(rows || cols);
        }
    }

    #[test]
    fn stroke_coverage_over_many_seeds() {
        for seed in 0..100 {
            let m = gen_mask(&MaskSpec::new(MaskKind::RandomStroke, 0.3, seed), 48).unwrap();
            assert!((0.28..=0.32).contains(&m.coverage()), "seed {seed}: {}", m.coverage());
        }
    }

    #[test]
    fn invalid_ratio_is_usage_error() {
        assert!(matches!(
            gen_mask(&MaskSpec::new(MaskKind::RandomRect, 1.5, 0), 8),
            Err(Error::Usage(_))
        ));
        assert!("diagonal".parse::<MaskKind>().is_err());
        for k in MaskKind::ALL {
            assert_eq!(k.to_string().parse::<MaskKind>().unwrap(), k);
        }
    }

    proptest! {
        #[test]
        fn ratio_masks_hit_target_within_two_percent(
            seed in any::<u64>(), ratio in 0.0f64..=1.0, side in 4usize..40, rect in any::<bool>()
        ) {
            let kind = if rect { MaskKind::RandomRect } else { MaskKind::RandomStroke };
            let m = gen_mask(&MaskSpec::new(kind, ratio, seed), side).unwrap();
            prop_assert!((m.coverage() - ratio).abs() <= 0.02 + 0.5 / (side * side) as f64);
            prop_assert_eq!(&m, &gen_mask(&MaskSpec::new(kind, ratio, seed), side).unwrap());
        }

        #[test]
        fn sequence_grid_round_trip(side in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let seq = PixelSequence::new(
                (0..side * side).map(|_| rng.random_range(0..4)).collect(),
                (0..side * side).map(|_| rng.random_bool(0.3)).collect(),
                side,
            ).unwrap();
            prop_assert_eq!(PixelSequence::from_grids(&seq.token_grid(), &seq.mask_grid()).unwrap(), seq);
        }

        #[test]
        fn masked_token_values_never_reach_embedding(seed in any::<u64>()) {
            let (set, emb) = embedding();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask: Vec<bool> = (0..4).map(|_| rng.random_bool(0.5)).collect();
            let a: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
            let b: Vec<usize> = a.iter().zip(&mask).map(|(&t, &m)| if m { (t + 1) % 5 } else { t }).collect();
            let xa = emb.value(&set, &PixelSequence::new(a, mask.clone(), 2).unwrap()).unwrap();
            let xb = emb.value(&set, &PixelSequence::new(b, mask, 2).unwrap()).unwrap();
            prop_assert_eq!(xa, xb);
        }
    }
}
