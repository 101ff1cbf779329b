//! Single-plane and RGB images, the on-disk formats used by the toolkit, and
//! the non-overlapping patch grid used by the estimator.
//!
//! Supported containers:
//!
//! * binary graymap (`P5`), 8- or 16-bit samples, big-endian as Netpbm requires
//! * binary pixmap (`P6`), 8- or 16-bit samples
//! * float map: header `FLOATMAP w h\n` followed by `w*h` little-endian `f32`
//! * float RGB map: header `FLOATRGB w h\n` followed by `3*w*h` interleaved
//!   little-endian `f32`
//!
//! Raw sensor planes are normalized by `2^-B` (see [`load_plane`]); files that
//! this crate writes itself are read back with max-value normalization
//! ([`read_plane`], [`read_color`]).

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FLOATMAP_MAGIC: &str = "FLOATMAP";
pub const FLOATRGB_MAGIC: &str = "FLOATRGB";

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("file not found: {0}")]
    FileNotFound(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("sample value {value} exceeds 2^{bit_depth} - 1")]
    BitDepthMismatch { value: u32, bit_depth: u32 },
    #[error("patch size {patch} exceeds image extent {width}x{height}")]
    PatchTooLarge {
        patch: usize,
        width: usize,
        height: usize,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// A single-channel image, row-major, nominal range `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePlane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
    /// Quantization of the source samples.
    pub bit_depth: u32,
}

impl ImagePlane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if data.len() != width * height {
            return Err(ImageError::DimensionMismatch(format!(
                "{} samples for a {width}x{height} plane",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
            bit_depth: 32,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
            bit_depth: 32,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
            bit_depth: 32,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    /// Copies out a `w x h` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self, ImageError> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(ImageError::DimensionMismatch(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + w]);
        }
        Ok(Self {
            width: w,
            height: h,
            data,
            bit_depth: self.bit_depth,
        })
    }
}

/// Three planes (R, G, B) sharing one geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    pub channels: [ImagePlane; 3],
}

impl ColorImage {
    pub fn from_planes(r: ImagePlane, g: ImagePlane, b: ImagePlane) -> Result<Self, ImageError> {
        let (w, h) = (r.width, r.height);
        if g.width != w || g.height != h || b.width != w || b.height != h {
            return Err(ImageError::DimensionMismatch(
                "color channels disagree in size".into(),
            ));
        }
        Ok(Self {
            width: w,
            height: h,
            channels: [r, g, b],
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        let p = ImagePlane::filled(width, height, value);
        Self {
            width,
            height,
            channels: [p.clone(), p.clone(), p],
        }
    }

    /// Planar `[3, h, w]` layout, the tensor convention used by the models.
    pub fn to_chw(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * self.width * self.height);
        for c in &self.channels {
            out.extend_from_slice(&c.data);
        }
        out
    }

    pub fn from_chw(width: usize, height: usize, data: &[f64]) -> Result<Self, ImageError> {
        let n = width * height;
        if data.len() != 3 * n {
            return Err(ImageError::DimensionMismatch(format!(
                "{} samples for a 3x{height}x{width} image",
                data.len()
            )));
        }
        let plane = |i: usize| ImagePlane {
            width,
            height,
            data: data[i * n..(i + 1) * n].to_vec(),
            bit_depth: 32,
        };
        Ok(Self {
            width,
            height,
            channels: [plane(0), plane(1), plane(2)],
        })
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self, ImageError> {
        Ok(Self {
            width: w,
            height: h,
            channels: [
                self.channels[0].crop(x0, y0, w, h)?,
                self.channels[1].crop(x0, y0, w, h)?,
                self.channels[2].crop(x0, y0, w, h)?,
            ],
        })
    }

    /// Rec. 601 luma, used when a single plane is needed from a color scene.
    pub fn luma(&self) -> ImagePlane {
        let [r, g, b] = &self.channels;
        let data = r
            .data
            .iter()
            .zip(&g.data)
            .zip(&b.data)
            .map(|((r, g), b)| 0.299 * r + 0.587 * g + 0.114 * b)
            .collect();
        ImagePlane {
            width: self.width,
            height: self.height,
            data,
            bit_depth: 32,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = self.clone();
        for c in &mut out.channels {
            c.data.iter_mut().for_each(|v| *v = f(*v));
        }
        out
    }
}

/// Output container for [`save_plane`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlaneFormat {
    Gray8,
    Gray16,
    Float,
}

impl PlaneFormat {
    pub fn max_value(self) -> Option<u32> {
        match self {
            PlaneFormat::Gray8 => Some(255),
            PlaneFormat::Gray16 => Some(65535),
            PlaneFormat::Float => None,
        }
    }
}

/// Quantizes `v in [0,1]` to `0..=max`, rounding to nearest with ties going
/// down (`0.5 * 255 -> 127`).
fn quantize(v: f64, max: u32) -> u32 {
    let x = v.clamp(0.0, 1.0) * max as f64;
    ((x - 0.5).ceil().max(0.0) as u32).min(max)
}

/// Raw samples of a Netpbm or float container before normalization.
#[derive(Debug, Clone, PartialEq)]
pub enum RawImage {
    Gray {
        width: usize,
        height: usize,
        max_value: u32,
        samples: Vec<u32>,
    },
    Rgb {
        width: usize,
        height: usize,
        max_value: u32,
        samples: Vec<u32>,
    },
    FloatGray(ImagePlane),
    FloatRgb(ColorImage),
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, ImageError> {
    fs::read(path).map_err(|e| {
        if e.kind() == io::ErrorKind::NotFound {
            ImageError::FileNotFound(path.display().to_string())
        } else {
            ImageError::Io(e)
        }
    })
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn token(&mut self) -> Result<&'a str, ImageError> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(ImageError::UnsupportedFormat("truncated header".into()));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| ImageError::UnsupportedFormat("non-ascii header".into()))
    }

    fn number(&mut self) -> Result<usize, ImageError> {
        let t = self.token()?;
        t.parse()
            .map_err(|_| ImageError::UnsupportedFormat(format!("bad header field {t:?}")))
    }

    /// Skips the single whitespace byte that terminates a header.
    fn payload(self) -> Result<&'a [u8], ImageError> {
        if self.pos >= self.bytes.len() {
            return Err(ImageError::UnsupportedFormat("missing payload".into()));
        }
        Ok(&self.bytes[self.pos + 1..])
    }
}

fn decode_samples(payload: &[u8], count: usize, max_value: u32) -> Result<Vec<u32>, ImageError> {
    let wide = max_value > 255;
    let need = if wide { 2 * count } else { count };
    if payload.len() < need {
        return Err(ImageError::UnsupportedFormat(format!(
            "payload has {} bytes, expected {need}",
            payload.len()
        )));
    }
    Ok(if wide {
        payload[..need]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as u32)
            .collect()
    } else {
        payload[..need].iter().map(|&b| b as u32).collect()
    })
}

fn decode_floats(payload: &[u8], count: usize) -> Result<Vec<f64>, ImageError> {
    if payload.len() < 4 * count {
        return Err(ImageError::UnsupportedFormat(format!(
            "float payload has {} bytes, expected {}",
            payload.len(),
            4 * count
        )));
    }
    Ok(payload[..4 * count]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

pub fn decode(bytes: &[u8]) -> Result<RawImage, ImageError> {
    let mut hdr = HeaderReader { bytes, pos: 0 };
    let magic = hdr.token()?;
    match magic {
        "P5" | "P6" => {
            let width = hdr.number()?;
            let height = hdr.number()?;
            let max_value = hdr.number()? as u32;
            if max_value == 0 || max_value > 65535 {
                return Err(ImageError::UnsupportedFormat(format!(
                    "maxval {max_value}"
                )));
            }
            let gray = magic == "P5";
            let count = width * height * if gray { 1 } else { 3 };
            let samples = decode_samples(hdr.payload()?, count, max_value)?;
            Ok(if gray {
                RawImage::Gray {
                    width,
                    height,
                    max_value,
                    samples,
                }
            } else {
                RawImage::Rgb {
                    width,
                    height,
                    max_value,
                    samples,
                }
            })
        }
        FLOATMAP_MAGIC => {
            let width = hdr.number()?;
            let height = hdr.number()?;
            let data = decode_floats(hdr.payload()?, width * height)?;
            Ok(RawImage::FloatGray(ImagePlane {
                width,
                height,
                data,
                bit_depth: 32,
            }))
        }
        FLOATRGB_MAGIC => {
            let width = hdr.number()?;
            let height = hdr.number()?;
            let inter = decode_floats(hdr.payload()?, 3 * width * height)?;
            Ok(RawImage::FloatRgb(deinterleave(width, height, &inter, 32)))
        }
        other => Err(ImageError::UnsupportedFormat(format!(
            "unknown magic {other:?}"
        ))),
    }
}

fn deinterleave(width: usize, height: usize, inter: &[f64], bit_depth: u32) -> ColorImage {
    let n = width * height;
    let mut planes = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for (i, px) in inter.chunks_exact(3).enumerate() {
        for c in 0..3 {
            planes[c][i] = px[c];
        }
    }
    let [r, g, b] = planes;
    let mk = |data| ImagePlane {
        width,
        height,
        data,
        bit_depth,
    };
    ColorImage {
        width,
        height,
        channels: [mk(r), mk(g), mk(b)],
    }
}

fn bits_for(max_value: u32) -> u32 {
    32 - max_value.leading_zeros()
}

/// Loads a raw sensor plane and normalizes it by `2^-bit_depth`.
///
/// Fails with [`ImageError::BitDepthMismatch`] when any sample exceeds
/// `2^bit_depth - 1`. Float maps are returned unchanged.
pub fn load_plane(path: impl AsRef<Path>, bit_depth: u32) -> Result<ImagePlane, ImageError> {
    let bytes = read_bytes(path.as_ref())?;
    plane_from_raw(decode(&bytes)?, bit_depth)
}

pub fn plane_from_raw(raw: RawImage, bit_depth: u32) -> Result<ImagePlane, ImageError> {
    match raw {
        RawImage::Gray {
            width,
            height,
            samples,
            ..
        } => {
            if bit_depth == 0 || bit_depth > 16 {
                return Err(ImageError::UnsupportedFormat(format!(
                    "bit depth {bit_depth}"
                )));
            }
            let limit = (1u32 << bit_depth) - 1;
            if let Some(&value) = samples.iter().find(|&&v| v > limit) {
                return Err(ImageError::BitDepthMismatch { value, bit_depth });
            }
            let scale = (-(bit_depth as f64)).exp2();
            Ok(ImagePlane {
                width,
                height,
                data: samples
                    .iter()
                    .map(|&v| (v as f64 * scale).clamp(0.0, 1.0))
                    .collect(),
                bit_depth,
            })
        }
        RawImage::FloatGray(p) => Ok(p),
        RawImage::Rgb { .. } | RawImage::FloatRgb(_) => Err(ImageError::UnsupportedFormat(
            "expected a single-channel image".into(),
        )),
    }
}

/// Loads a plane written by [`save_plane`], normalizing integer samples by the
/// container's max value.
pub fn read_plane(path: impl AsRef<Path>) -> Result<ImagePlane, ImageError> {
    let bytes = read_bytes(path.as_ref())?;
    match decode(&bytes)? {
        RawImage::Gray {
            width,
            height,
            max_value,
            samples,
        } => Ok(ImagePlane {
            width,
            height,
            data: samples
                .iter()
                .map(|&v| v as f64 / max_value as f64)
                .collect(),
            bit_depth: bits_for(max_value),
        }),
        RawImage::FloatGray(p) => Ok(p),
        _ => Err(ImageError::UnsupportedFormat(
            "expected a single-channel image".into(),
        )),
    }
}

/// Loads a color image (`P6` or `FLOATRGB`) with max-value normalization.
/// A graymap is replicated into three channels.
pub fn read_color(path: impl AsRef<Path>) -> Result<ColorImage, ImageError> {
    let bytes = read_bytes(path.as_ref())?;
    match decode(&bytes)? {
        RawImage::Rgb {
            width,
            height,
            max_value,
            samples,
        } => {
            let inter: Vec<f64> = samples
                .iter()
                .map(|&v| v as f64 / max_value as f64)
                .collect();
            Ok(deinterleave(width, height, &inter, bits_for(max_value)))
        }
        RawImage::FloatRgb(c) => Ok(c),
        RawImage::Gray { .. } | RawImage::FloatGray(_) => {
            let p = read_plane(path)?;
            Ok(ColorImage {
                width: p.width,
                height: p.height,
                channels: [p.clone(), p.clone(), p],
            })
        }
    }
}

pub fn encode_plane(plane: &ImagePlane, format: PlaneFormat) -> Vec<u8> {
    let mut out = Vec::new();
    match format {
        PlaneFormat::Float => {
            out.extend_from_slice(
                format!("{FLOATMAP_MAGIC} {} {}\n", plane.width, plane.height).as_bytes(),
            );
            for &v in &plane.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        PlaneFormat::Gray8 | PlaneFormat::Gray16 => {
            let max = format.max_value().unwrap_or(255);
            out.extend_from_slice(format!("P5\n{} {}\n{max}\n", plane.width, plane.height).as_bytes());
            push_samples(&mut out, plane.data.iter().copied(), max);
        }
    }
    out
}

fn push_samples(out: &mut Vec<u8>, values: impl Iterator<Item = f64>, max: u32) {
    for v in values {
        let q = quantize(v, max);
        if max > 255 {
            out.extend_from_slice(&(q as u16).to_be_bytes());
        } else {
            out.push(q as u8);
        }
    }
}

pub fn encode_color(img: &ColorImage, format: PlaneFormat) -> Vec<u8> {
    let n = img.width * img.height;
    let inter = (0..n).flat_map(|i| (0..3).map(move |c| (c, i)));
    let mut out = Vec::new();
    match format {
        PlaneFormat::Float => {
            out.extend_from_slice(
                format!("{FLOATRGB_MAGIC} {} {}\n", img.width, img.height).as_bytes(),
            );
            for (c, i) in inter {
                out.extend_from_slice(&(img.channels[c].data[i] as f32).to_le_bytes());
            }
        }
        PlaneFormat::Gray8 | PlaneFormat::Gray16 => {
            let max = format.max_value().unwrap_or(255);
            out.extend_from_slice(format!("P6\n{} {}\n{max}\n", img.width, img.height).as_bytes());
            push_samples(&mut out, inter.map(|(c, i)| img.channels[c].data[i]), max);
        }
    }
    out
}

pub fn save_plane(
    plane: &ImagePlane,
    path: impl AsRef<Path>,
    format: PlaneFormat,
) -> Result<(), ImageError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_plane(plane, format))?;
    Ok(())
}

pub fn save_color(
    img: &ColorImage,
    path: impl AsRef<Path>,
    format: PlaneFormat,
) -> Result<(), ImageError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_color(img, format))?;
    Ok(())
}

/// A patch of the non-overlapping grid. `grid_x`/`grid_y` index the grid
/// cell; `x`/`y` are the pixel coordinates of its top-left corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchView<'a> {
    pub plane: &'a ImagePlane,
    pub grid_x: usize,
    pub grid_y: usize,
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

impl<'a> PatchView<'a> {
    pub fn rows(&self) -> impl Iterator<Item = &'a [f64]> + Clone + 'a {
        let (plane, x, size) = (self.plane, self.x, self.size);
        (self.y..self.y + size).map(move |r| &plane.data[r * plane.width + x..r * plane.width + x + size])
    }

    pub fn pixels(&self) -> impl Iterator<Item = f64> + Clone + 'a {
        self.rows().flat_map(|r| r.iter().copied())
    }
}

/// Splits `plane` into a `floor(h/O) x floor(w/O)` grid of `O x O` patches in
/// row-major grid order. Right and bottom remainders are dropped.
pub fn partition_patches(
    plane: &ImagePlane,
    patch_size: usize,
) -> Result<Vec<PatchView<'_>>, ImageError> {
    if patch_size == 0 || patch_size > plane.width.min(plane.height) {
        return Err(ImageError::PatchTooLarge {
            patch: patch_size,
            width: plane.width,
            height: plane.height,
        });
    }
    let (gw, gh) = (plane.width / patch_size, plane.height / patch_size);
    let mut out = Vec::with_capacity(gw * gh);
    for gy in 0..gh {
        for gx in 0..gw {
            out.push(PatchView {
                plane,
                grid_x: gx,
                grid_y: gy,
                x: gx * patch_size,
                y: gy * patch_size,
                size: patch_size,
            });
        }
    }
    Ok(out)
}

/// 2x2 phase of the top-left sample of a Bayer mosaic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BayerPhase {
    Rggb,
    Bggr,
    Grbg,
    Gbrg,
}

impl BayerPhase {
    /// Channel labels of the subplanes returned by [`split_bayer`], in the
    /// order (0,0), (1,0), (0,1), (1,1) of the 2x2 cell.
    pub fn labels(self) -> [&'static str; 4] {
        match self {
            BayerPhase::Rggb => ["R", "Gr", "Gb", "B"],
            BayerPhase::Bggr => ["B", "Gb", "Gr", "R"],
            BayerPhase::Grbg => ["Gr", "R", "B", "Gb"],
            BayerPhase::Gbrg => ["Gb", "B", "R", "Gr"],
        }
    }
}

impl std::str::FromStr for BayerPhase {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "rggb" => Ok(Self::Rggb),
            "bggr" => Ok(Self::Bggr),
            "grbg" => Ok(Self::Grbg),
            "gbrg" => Ok(Self::Gbrg),
            _ => Err(format!("unknown bayer phase {s:?}")),
        }
    }
}

/// Extracts the four half-resolution subplanes of a mosaic by 2x2 phase,
/// ordered (0,0), (1,0), (0,1), (1,1) as `(dx, dy)`.
pub fn split_bayer(mosaic: &ImagePlane) -> Result<[ImagePlane; 4], ImageError> {
    if mosaic.width < 2 || mosaic.height < 2 {
        return Err(ImageError::DimensionMismatch(
            "mosaic smaller than one 2x2 cell".into(),
        ));
    }
    let (w, h) = (mosaic.width / 2, mosaic.height / 2);
    let sub = |dx: usize, dy: usize| {
        let mut p = ImagePlane::from_fn(w, h, |x, y| mosaic.get(2 * x + dx, 2 * y + dy));
        p.bit_depth = mosaic.bit_depth;
        p
    };
    Ok([sub(0, 0), sub(1, 0), sub(0, 1), sub(1, 1)])
}
