//! Images, label grids and their file formats (PNG, binary PPM/PGM).

use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `H × W × C` image with interleaved channels and values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::dim("image extents must be positive"));
        }
        if data.len() != height * width * channels {
            return Err(Error::dim(format!(
                "{} values for a {height}×{width}×{channels} image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::usage(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image from `f(row, col, channel)`; values are clamped to `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "image extents must be positive");
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch).clamp(0.0, 1.0));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, color: &[f64]) -> Self {
        Self::from_fn(height, width, color.len(), |_, _, ch| color[ch])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, r: usize, c: usize) -> &[f64] {
        let i = (r * self.width + c) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn get(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.data[(r * self.width + c) * self.channels + ch]
    }

    pub fn pixels(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.channels)
    }

    /// Channel-major tensor `[C, H, W]`.
    pub fn to_chw(&self) -> Tensor {
        let (h, w, ch) = (self.height, self.width, self.channels);
        Tensor::from_fn(&[ch, h, w], |i| {
            let (c, p) = (i / (h * w), i % (h * w));
            self.data[p * ch + c]
        })
    }

    /// Inverse of [`Self::to_chw`]; values are clamped to `[0, 1]`.
    pub fn from_chw(t: &Tensor) -> Result<Self> {
        let &[ch, h, w] = t.shape() else {
            return Err(Error::dim(format!("expected [C, H, W], got {:?}", t.shape())));
        };
        Ok(Self::from_fn(h, w, ch, |r, c, k| t.data()[(k * h + r) * w + c]))
    }

    pub fn max_abs_diff(&self, other: &ImageTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v * 255.0).round() as u8).collect()
    }
}

/// Row-major `H × W` grid of labels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// Palette index per pixel.
pub type IndexGrid = Grid<usize>;
/// `true` marks a missing pixel.
pub type MaskGrid = Grid<bool>;

impl<T: Clone> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::dim(format!(
                "{} cells for a {height}×{width} grid",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        assert!(height > 0 && width > 0, "grid extents must be positive");
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(height > 0 && width > 0, "grid extents must be positive");
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> &T {
        &self.data[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.width + c] = v;
    }
}

impl MaskGrid {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    pub fn coverage(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    pub fn not(&self) -> MaskGrid {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|m| !m).collect(),
        }
    }

    /// Reduces to `side × side`; a cell is masked when any pixel of its
    /// source box is masked.
    pub fn shrink_any(&self, side: usize) -> Result<MaskGrid> {
        if side == 0 || side > self.height || side > self.width {
            return Err(Error::usage(format!(
                "cannot shrink a {}×{} mask to {side}",
                self.height, self.width
            )));
        }
        let span = |i: usize, n: usize| (i * n / side, ((i + 1) * n).div_ceil(side));
        Ok(Grid::from_fn(side, side, |r, c| {
            let (r0, r1) = span(r, self.height);
            let (c0, c1) = span(c, self.width);
            (r0..r1).any(|y| (c0..c1).any(|x| *self.get(y, x)))
        }))
    }

    /// Single-channel image: 1 where masked.
    pub fn to_image(&self) -> ImageTensor {
        ImageTensor::from_fn(self.height, self.width, 1, |r, c, _| {
            if *self.get(r, c) {
                1.0
            } else {
                0.0
            }
        })
    }

    /// A pixel is masked when any channel is at least half intensity.
    pub fn from_image(img: &ImageTensor) -> MaskGrid {
        Grid::from_fn(img.height(), img.width(), |r, c| {
            img.pixel(r, c).iter().any(|&v| v >= 0.5)
        })
    }
}

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

/// Decodes PNG (8/16-bit gray, gray+alpha, RGB, RGBA, palette), binary PPM
/// (`P6`) or binary PGM (`P5`). Alpha is dropped; gray PNGs become RGB.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

pub fn decode_image(bytes: &[u8]) -> Result<ImageTensor> {
    if bytes.starts_with(PNG_MAGIC) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P6") {
        decode_pnm(bytes, 3)
    } else if bytes.starts_with(b"P5") {
        decode_pnm(bytes, 1)
    } else {
        Err(Error::format(0, "unrecognized image signature (expected PNG, P6 or P5)"))
    }
}

/// Encodes by extension: `.png`, `.ppm` (3 channels) or `.pgm` (1 channel).
pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let bytes = match ext.as_str() {
        "png" => encode_png(img)?,
        "ppm" | "pgm" => encode_pnm(img, &ext)?,
        _ => {
            return Err(Error::usage(format!(
                "cannot infer image format of {} (use .png, .ppm or .pgm)",
                path.display()
            )))
        }
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_pnm(img: &ImageTensor, ext: &str) -> Result<Vec<u8>> {
    let magic = match (ext, img.channels()) {
        ("ppm", 3) => "P6",
        ("pgm", 1) => "P5",
        _ => {
            return Err(Error::dim(format!(
                "{} channels cannot be written as .{ext}",
                img.channels()
            )))
        }
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.to_bytes());
    Ok(out)
}

fn encode_png(img: &ImageTensor) -> Result<Vec<u8>> {
    let color = match img.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        n => return Err(Error::dim(format!("{n} channels cannot be written as PNG"))),
    };
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let to_err = |e: png::EncodingError| Error::format(0, format!("PNG encoding: {e}"));
    let mut writer = enc.write_header().map_err(to_err)?;
    writer.write_image_data(&img.to_bytes()).map_err(to_err)?;
    writer.finish().map_err(to_err)?;
    Ok(out)
}

fn decode_png(bytes: &[u8]) -> Result<ImageTensor> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let to_err = |e: png::DecodingError| Error::format(0, format!("PNG decoding: {e}"));
    let mut reader = dec.read_info().map_err(to_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(0, "PNG image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(to_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let src_ch = info.color_type.samples();
    let take: &[usize] = match info.color_type {
        png::ColorType::Grayscale | png::ColorType::GrayscaleAlpha => &[0, 0, 0],
        png::ColorType::Rgb | png::ColorType::Rgba => &[0, 1, 2],
        png::ColorType::Indexed => return Err(Error::format(0, "unexpanded indexed PNG")),
    };
    let data = (0..h * w)
        .flat_map(|p| {
            let row = p / w;
            let base = row * info.line_size + (p % w) * src_ch;
            take.iter().map(move |&ch| base + ch)
        })
        .map(|i| buf[i] as f64 / 255.0)
        .collect();
    ImageTensor::new(h, w, 3, data)
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .filter(|&n: &usize| n > 0)
            .ok_or_else(|| Error::format(start, format!("expected positive {what}")))
    }
}

fn decode_pnm(bytes: &[u8], channels: usize) -> Result<ImageTensor> {
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let w = cur.number("width")?;
    let h = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval > 65535 {
        return Err(Error::format(cur.pos, format!("maxval {maxval} exceeds 65535")));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(Error::format(cur.pos, "expected whitespace after maxval")),
    }
    let sample = if maxval < 256 { 1 } else { 2 };
    let n = w * h * channels;
    let body = &bytes[cur.pos..];
    if body.len() < n * sample {
        return Err(Error::format(
            cur.pos + body.len(),
            format!("truncated pixel data: need {} bytes, found {}", n * sample, body.len()),
        ));
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let v = if sample == 1 {
            body[i] as usize
        } else {
            (body[2 * i] as usize) << 8 | body[2 * i + 1] as usize
        };
        if v > maxval {
            return Err(Error::format(cur.pos + i * sample, format!("sample {v} exceeds maxval {maxval}")));
        }
        data.push(v as f64 / maxval as f64);
    }
    ImageTensor::new(h, w, channels, data)
}

/// Reads a mask image; any pixel at or above half intensity is masked.
pub fn load_mask(path: impl AsRef<Path>) -> Result<MaskGrid> {
    Ok(MaskGrid::from_image(&load_image(path)?))
}

/// Writes a mask as PGM/PNG with 255 = masked.
pub fn save_mask(mask: &MaskGrid, path: impl AsRef<Path>) -> Result<()> {
    save_image(&mask.to_image(), path)
}
