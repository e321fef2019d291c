//! Discrete color vocabulary fitted with K-Means.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{Grid, ImageTensor, IndexGrid};
use crate::rng;

pub type Rgb = [f64; 3];

const MAGIC: &[u8; 6] = b"RCPAL1";
// Points per work unit in the assignment pass; fixed so sums do not depend on
// the thread count.
const ASSIGN_CHUNK: usize = 4096;

fn dist2(a: &Rgb, b: &Rgb) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Ordered set of distinct colors in `[0, 1]³`, sorted lexicographically and
/// held at `f32` precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Palette {
    centroids: Vec<Rgb>,
}

impl Palette {
    pub fn new(centroids: Vec<Rgb>) -> Result<Self> {
        if centroids.is_empty() {
            return Err(Error::Vocabulary("palette needs at least one color".into()));
        }
        let mut centroids: Vec<Rgb> = centroids
            .into_iter()
            .map(|c| c.map(|v| v as f32 as f64))
            .collect();
        if let Some(c) = centroids.iter().find(|c| c.iter().any(|v| !(0.0..=1.0).contains(v))) {
            return Err(Error::Vocabulary(format!("color {c:?} outside [0, 1]³")));
        }
        centroids.sort_by(|a, b| a.partial_cmp(b).expect("finite colors"));
        if centroids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Vocabulary("palette colors must be distinct".into()));
        }
        Ok(Self { centroids })
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn centroids(&self) -> &[Rgb] {
        &self.centroids
    }

    /// Index of the nearest centroid; ties go to the lowest index.
    pub fn nearest(&self, rgb: &[f64]) -> usize {
        let p = [rgb[0], rgb[1], rgb[2]];
        let mut best = (0, f64::INFINITY);
        for (i, c) in self.centroids.iter().enumerate() {
            let d = dist2(&p, c);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    pub fn quantize(&self, img: &ImageTensor) -> Result<IndexGrid> {
        if img.channels() != 3 {
            return Err(Error::dim(format!("quantize needs RGB, got {} channels", img.channels())));
        }
        Grid::new(
            img.height(),
            img.width(),
            img.pixels().map(|p| self.nearest(p)).collect(),
        )
    }

    pub fn dequantize(&self, grid: &IndexGrid) -> Result<ImageTensor> {
        if let Some(&i) = grid.data().iter().find(|&&i| i >= self.k()) {
            return Err(Error::Vocabulary(format!("index {i} outside palette of {}", self.k())));
        }
        Ok(ImageTensor::from_fn(grid.height(), grid.width(), 3, |r, c, ch| {
            self.centroids[*grid.get(r, c)][ch]
        }))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend((self.k() as u32).to_le_bytes());
        for c in &self.centroids {
            for &v in c {
                out.extend((v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if !bytes.starts_with(MAGIC) {
            return Err(Error::format(0, "missing RCPAL1 magic"));
        }
        let k = bytes
            .get(6..10)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or_else(|| Error::format(6, "truncated palette size"))?;
        let need = 10 + k * 12;
        if bytes.len() != need {
            return Err(Error::format(
                bytes.len().min(need),
                format!("palette of {k} colors needs {need} bytes, found {}", bytes.len()),
            ));
        }
        let vals: Vec<f64> = bytes[10..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        let centroids: Vec<Rgb> = vals.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let palette = Self::new(centroids.clone())?;
        if palette.centroids != centroids {
            return Err(Error::format(10, "palette colors are not in canonical order"));
        }
        Ok(palette)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// SHA-256 of the serialized palette, lowercase hex.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Mean squared quantization error over `pixels`.
    pub fn mse(&self, pixels: &[Rgb]) -> f64 {
        let total: f64 = pixels
            .iter()
            .map(|p| dist2(p, &self.centroids[self.nearest(p)]))
            .sum();
        total / pixels.len().max(1) as f64
    }
}

/// Result of [`fit_kmeans`].
#[derive(Debug, Clone)]
pub struct KmeansFit {
    pub palette: Palette,
    /// Inertia after each assignment pass.
    pub inertia: Vec<f64>,
    pub converged: bool,
}

/// Worker count: `RETCOMPLETE_THREADS` if set, else the available parallelism.
pub fn worker_count() -> usize {
    std::env::var("RETCOMPLETE_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Assigns every point to its nearest centroid; returns the total inertia.
fn assign(points: &[Rgb], centroids: &[Rgb], labels: &mut [usize]) -> f64 {
    let work = |pts: &[Rgb], out: &mut [usize]| -> f64 {
        let mut inertia = 0.0;
        for (p, l) in pts.iter().zip(out.iter_mut()) {
            let mut best = (0, f64::INFINITY);
            for (i, c) in centroids.iter().enumerate() {
                let d = dist2(p, c);
                if d < best.1 {
                    best = (i, d);
                }
            }
            *l = best.0;
            inertia += best.1;
        }
        inertia
    };
    let chunks: Vec<(&[Rgb], &mut [usize])> = points
        .chunks(ASSIGN_CHUNK)
        .zip(labels.chunks_mut(ASSIGN_CHUNK))
        .collect();
    let threads = worker_count().min(chunks.len());
    let mut partial = vec![0.0; chunks.len()];
    if threads <= 1 {
        for ((pts, out), s) in chunks.into_iter().zip(&mut partial) {
            *s = work(pts, out);
        }
    } else {
        let per = chunks.len().div_ceil(threads);
        let mut jobs: Vec<_> = chunks.into_iter().zip(partial.iter_mut()).collect();
        std::thread::scope(|scope| {
            while !jobs.is_empty() {
                let batch: Vec<_> = jobs.drain(..per.min(jobs.len())).collect();
                scope.spawn(move || {
                    for ((pts, out), s) in batch {
                        *s = work(pts, out);
                    }
                });
            }
        });
    }
    partial.iter().sum()
}

fn plus_plus_seed(points: &[Rgb], k: usize, rng: &mut impl Rng) -> Vec<Rgb> {
    let mut centroids = vec![points[rng.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[next];
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding. Stops when assignments stop
/// changing or after `max_iters` passes. Empty clusters are moved to the point
/// lying farthest from its own centroid.
pub fn fit_kmeans(pixels: &[Rgb], k: usize, max_iters: usize, seed: u64) -> Result<KmeansFit> {
    if k == 0 {
        return Err(Error::Vocabulary("k must be positive".into()));
    }
    if let Some(p) = pixels.iter().find(|p| p.iter().any(|v| !(0.0..=1.0).contains(v))) {
        return Err(Error::Vocabulary(format!("pixel {p:?} outside [0, 1]³")));
    }
    let distinct: HashSet<[u64; 3]> = pixels.iter().map(|p| p.map(f64::to_bits)).collect();
    if distinct.len() < k {
        return Err(Error::Vocabulary(format!(
            "{} distinct colors cannot form a palette of {k}",
            distinct.len()
        )));
    }
    let mut rng = rng::stream(seed, rng::PALETTE);
    let mut centroids = plus_plus_seed(pixels, k, &mut rng);
    let mut labels = vec![usize::MAX; pixels.len()];
    let mut scratch = vec![0; pixels.len()];
    let mut inertia = Vec::new();
    let mut converged = false;
    for _ in 0..max_iters.max(1) {
        inertia.push(assign(pixels, &centroids, &mut scratch));
        if scratch == labels {
            converged = true;
            break;
        }
        std::mem::swap(&mut labels, &mut scratch);
        let mut sums = vec![[0.0; 3]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in pixels.iter().zip(&labels) {
            counts[l] += 1;
            for ch in 0..3 {
                sums[l][ch] += p[ch];
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].map(|s| s / counts[j] as f64);
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                let far = pixels
                    .iter()
                    .zip(&labels)
                    .map(|(p, &l)| dist2(p, &centroids[l]))
                    .enumerate()
                    .fold((0, -1.0), |best, (i, d)| if d > best.1 { (i, d) } else { best });
                centroids[j] = pixels[far.0];
                // the moved point now forms this cluster on its own
                labels[far.0] = j;
                counts[j] = 1;
            }
        }
    }
    let palette = Palette::new(centroids)?;
    Ok(KmeansFit {
        palette,
        inertia,
        converged,
    })
}

/// Flattens images into a pixel list for [`fit_kmeans`].
pub fn collect_pixels<'a>(images: impl IntoIterator<Item = &'a ImageTensor>) -> Result<Vec<Rgb>> {
    let mut out = Vec::new();
    for img in images {
        if img.channels() != 3 {
            return Err(Error::dim("palette corpus images must be RGB"));
        }
        out.extend(img.pixels().map(|p| [p[0], p[1], p[2]]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn two_point_clusters() {
        let mut px = vec![[0.0; 3]; 100];
        px.extend(vec![[1.0; 3]; 100]);
        let fit = fit_kmeans(&px, 2, 50, 0).unwrap();
        assert_eq!(fit.palette.centroids(), &[[0.0; 3], [1.0; 3]]);
        assert!(fit.converged);
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let px = vec![[0.2, 0.4, 0.6], [0.4, 0.0, 0.2], [0.0, 0.2, 1.0]];
        let fit = fit_kmeans(&px, 1, 10, 3).unwrap();
        let c = fit.palette.centroids()[0];
        for ch in 0..3 {
            let mean = px.iter().map(|p| p[ch]).sum::<f64>() / 3.0;
            assert!((c[ch] - mean).abs() < 1e-7);
        }
    }

    #[test]
    fn gaussian_blobs_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let centers: [Rgb; 3] = [[0.2, 0.2, 0.2], [0.8, 0.2, 0.5], [0.4, 0.9, 0.8]];
        let noise = Normal::new(0.0, 0.03).unwrap();
        let mut px = Vec::new();
        let mut means = [[0.0; 3]; 3];
        for (b, ctr) in centers.iter().enumerate() {
            for _ in 0..300 {
                let p = ctr.map(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0));
                for ch in 0..3 {
                    means[b][ch] += p[ch] / 300.0;
                }
                px.push(p);
            }
        }
        let fit = fit_kmeans(&px, 3, 100, 9).unwrap();
        for m in &means {
            let near = fit.palette.centroids().iter().map(|c| dist2(c, m).sqrt()).fold(f64::MAX, f64::min);
            assert!(near < 0.05, "blob mean {m:?} not recovered");
        }
    }

    #[test]
    fn too_few_distinct_colors() {
        let px = vec![[0.5; 3]; 50];
        assert!(matches!(fit_kmeans(&px, 2, 10, 0), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn quantize_ties_go_to_lowest_index() {
        let far = |x: f64| [x, 1.0, 1.0];
        let cols = vec![
            far(0.0), far(0.0625), [0.125, 0.0, 0.0], far(0.1875),
            far(0.25), far(0.3125), far(0.375), [0.875, 0.0, 0.0],
        ];
        let pal = Palette::new(cols).unwrap();
        assert_eq!(pal.centroids()[2], [0.125, 0.0, 0.0]);
        assert_eq!(pal.centroids()[7], [0.875, 0.0, 0.0]);
        assert_eq!(pal.nearest(&[0.5, 0.0, 0.0]), 2);
    }

    #[test]
    fn quantize_matches_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cols: Vec<Rgb> = (0..16).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let pal = Palette::new(cols).unwrap();
        let img = ImageTensor::from_fn(10, 10, 3, |_, _, _| rng.random());
        let grid = pal.quantize(&img).unwrap();
        for (p, &got) in img.pixels().zip(grid.data()) {
            let d: Vec<f64> = pal.centroids().iter().map(|c| (0..3).map(|i| (p[i] - c[i]).powi(2)).sum()).collect();
            let min = d.iter().cloned().fold(f64::MAX, f64::min);
            assert_eq!(got, d.iter().position(|&x| x == min).unwrap());
        }
    }

    #[test]
    fn exact_centroid_colors_quantize_to_their_indices() {
        let pal = Palette::new(vec![[0.1, 0.2, 0.3], [0.9, 0.1, 0.0], [0.5, 0.5, 0.5], [0.0, 1.0, 0.0]]).unwrap();
        let grid = Grid::new(1, 4, vec![0, 1, 2, 3]).unwrap();
        let img = pal.dequantize(&grid).unwrap();
        for i in 0..4 {
            assert_eq!(img.pixel(0, i), &pal.centroids()[i]);
        }
        assert_eq!(pal.quantize(&img).unwrap(), grid);
        assert!(matches!(pal.dequantize(&Grid::filled(1, 1, 4)), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn serialization_round_trip_and_errors() {
        let pal = Palette::new(vec![[0.3, 0.1, 0.2], [0.1, 0.9, 0.2]]).unwrap();
        let bytes = pal.to_bytes();
        assert_eq!(&bytes[..6], b"RCPAL1");
        assert_eq!(Palette::from_bytes(&bytes).unwrap(), pal);
        assert!(matches!(Palette::from_bytes(&bytes[..12]), Err(Error::Format { .. })));
        assert!(matches!(Palette::from_bytes(b"RCPALX"), Err(Error::Format { offset: 0, .. })));
        assert_eq!(pal.hash().len(), 64);
    }

    #[test]
    fn more_colors_never_worse_than_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let px: Vec<Rgb> = (0..500).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let one = fit_kmeans(&px, 1, 50, 1).unwrap().palette.mse(&px);
        let many = fit_kmeans(&px, 6, 50, 1).unwrap().palette.mse(&px);
        assert!(many <= one);
    }

    #[test]
    fn assignment_is_thread_count_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let px: Vec<Rgb> = (0..3 * ASSIGN_CHUNK + 17).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let cents = plus_plus_seed(&px, 5, &mut rng);
        let mut a = vec![0; px.len()];
        let serial = {
            let mut s = 0.0;
            for (p, l) in px.chunks(ASSIGN_CHUNK).zip(a.chunks_mut(ASSIGN_CHUNK)) {
                s += assign(p, &cents, l);
            }
            s
        };
        let mut b = vec![0; px.len()];
        assert_eq!(assign(&px, &cents, &mut b), serial);
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn inertia_never_increases(seed in any::<u64>(), k in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let px: Vec<Rgb> = (0..200).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
            let fit = fit_kmeans(&px, k, 40, seed).unwrap();
            for w in fit.inertia.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12);
            }
        }

        #[test]
        fn dequantize_then_quantize_is_identity(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cols: Vec<Rgb> = (0..6).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
            let pal = Palette::new(cols).unwrap();
            let grid = Grid::from_fn(4, 5, |_, _| rng.random_range(0..6));
            prop_assert_eq!(pal.quantize(&pal.dequantize(&grid).unwrap()).unwrap(), grid);
        }
    }
}
