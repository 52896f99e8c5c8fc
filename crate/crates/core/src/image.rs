//! Image containers and raster ingestion.
//!
//! Pixels are `f64` in `[0, 1]`, stored row-major with three interleaved
//! channels. Integer rasters are converted on ingestion.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;
pub const MIN_SIDE: usize = 8;

#[derive(Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Image {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Image")
            .field("height", &self.height)
            .field("width", &self.width)
            .finish_non_exhaustive()
    }
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Validation(format!(
                "image must be non-empty, got {height}x{width}"
            )));
        }
        if data.len() != height * width * CHANNELS {
            return Err(Error::Validation(format!(
                "expected {} values for a {height}x{width} RGB image, got {}",
                height * width * CHANNELS,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds an image from arbitrary reals, clamping into `[0, 1]`.
    /// Non-finite values are rejected.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite pixel value".into()));
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Self::new(height, width, data)
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                for c in 0..CHANNELS {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::from_clamped(height, width, data)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * CHANNELS])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    /// Rounds every value to the nearest multiple of 1/65535 so that a 16-bit
    /// PNG round trip is exact.
    pub fn quantized16(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| quantize16(v)).collect(),
        }
    }

    pub fn is_quantized16(&self) -> bool {
        self.data.iter().all(|&v| quantize16(v) == v)
    }

    /// SHA-256 over shape and the exact bit patterns of every value.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.height as u64).to_le_bytes());
        hasher.update((self.width as u64).to_le_bytes());
        for v in &self.data {
            hasher.update(v.to_bits().to_le_bytes());
        }
        hex(&hasher.finalize())
    }

    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::Domain(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(sum / self.data.len() as f64)
    }
}

#[inline]
pub fn quantize16(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 65535.0).round() / 65535.0
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeatherTag {
    Clear,
    Rain,
    Haze,
    Snow,
}

impl WeatherTag {
    pub const ALL: [WeatherTag; 4] = [
        WeatherTag::Clear,
        WeatherTag::Rain,
        WeatherTag::Haze,
        WeatherTag::Snow,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            WeatherTag::Clear => "clear",
            WeatherTag::Rain => "rain",
            WeatherTag::Haze => "haze",
            WeatherTag::Snow => "snow",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for WeatherTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Synthetic,
    Real,
}

/// Image ids double as file stems, so they are restricted to a portable set.
pub fn validate_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(Error::Validation(format!("invalid image id `{id}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub pixels: Image,
    pub weather_tag: Option<WeatherTag>,
    pub source: Source,
}

impl ImageSample {
    pub fn new(
        id: impl Into<String>,
        pixels: Image,
        weather_tag: Option<WeatherTag>,
        source: Source,
    ) -> Result<Self> {
        let id = id.into();
        validate_id(&id)?;
        if pixels.height() < MIN_SIDE || pixels.width() < MIN_SIDE {
            return Err(Error::Validation(format!(
                "image `{id}` is {}x{}, both sides must be at least {MIN_SIDE}",
                pixels.height(),
                pixels.width()
            )));
        }
        Ok(Self {
            id,
            pixels,
            weather_tag,
            source,
        })
    }

    /// Same identity and metadata, different pixels (a restoration of this sample).
    pub fn with_pixels(&self, pixels: Image) -> Result<Self> {
        if pixels.shape() != self.pixels.shape() {
            return Err(Error::Domain(format!(
                "restoration of `{}` has shape {:?}, expected {:?}",
                self.id,
                pixels.shape(),
                self.pixels.shape()
            )));
        }
        Ok(Self {
            id: self.id.clone(),
            pixels,
            weather_tag: self.weather_tag,
            source: self.source,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPair {
    pub degraded: ImageSample,
    pub clean: ImageSample,
}

impl LabeledPair {
    pub fn new(degraded: ImageSample, clean: ImageSample) -> Result<Self> {
        if degraded.pixels.shape() != clean.pixels.shape() {
            return Err(Error::Validation(format!(
                "pair `{}`: degraded {:?} and clean {:?} differ in shape",
                degraded.id,
                degraded.pixels.shape(),
                clean.pixels.shape()
            )));
        }
        if degraded.source != Source::Synthetic {
            return Err(Error::Validation(format!(
                "pair `{}`: labeled inputs must be synthetic",
                degraded.id
            )));
        }
        Ok(Self { degraded, clean })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct UnlabeledSet {
    items: Vec<ImageSample>,
}

impl UnlabeledSet {
    pub fn new(items: Vec<ImageSample>) -> Result<Self> {
        if let Some(bad) = items.iter().find(|s| s.source != Source::Real) {
            return Err(Error::Validation(format!(
                "unlabeled item `{}` is not a real image",
                bad.id
            )));
        }
        ensure_unique_ids(items.iter().map(|s| s.id.as_str()))?;
        Ok(Self { items })
    }

    pub fn items(&self) -> &[ImageSample] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ImageSample> {
        self.items.iter().find(|s| s.id == id)
    }
}

pub fn ensure_unique_ids<'a>(ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::Validation(format!("duplicate image id `{id}`")));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Raster IO

pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Codec(format!("{}: {e}", path.display())))?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let data = match img {
        image::DynamicImage::ImageLuma16(_)
        | image::DynamicImage::ImageLumaA16(_)
        | image::DynamicImage::ImageRgb16(_)
        | image::DynamicImage::ImageRgba16(_) => img
            .to_rgb16()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect(),
        other => other
            .to_rgb8()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 255.0)
            .collect(),
    };
    Image::new(height, width, data)
}

/// Writes a 16-bit RGB PNG. Values are quantized to the 16-bit grid.
pub fn write_png16(path: &Path, img: &Image) -> Result<()> {
    let raw: Vec<u16> = img
        .as_slice()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf = image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(
        img.width() as u32,
        img.height() as u32,
        raw,
    )
    .ok_or_else(|| Error::Codec("buffer size mismatch".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Codec(format!("{}: {e}", path.display())))
}

pub fn encode_png16(img: &Image) -> Result<Vec<u8>> {
    let raw: Vec<u16> = img
        .as_slice()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf = image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(
        img.width() as u32,
        img.height() as u32,
        raw,
    )
    .ok_or_else(|| Error::Codec("buffer size mismatch".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    image::DynamicImage::ImageRgb16(buf)
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Codec(e.to_string()))?;
    Ok(out.into_inner())
}

/// PNG files in `dir`, sorted by file stem.
pub fn list_pngs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png || !path.is_file() {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        out.push((stem.to_string(), path));
    }
    out.sort();
    Ok(out)
}

/// Outcome of reading a directory: successfully decoded samples plus the ids
/// that could not be read.
#[derive(Debug, Default)]
pub struct DirLoad {
    pub samples: Vec<ImageSample>,
    pub errors: Vec<(String, String)>,
}

pub fn load_dir(dir: &Path, source: Source, tag: Option<WeatherTag>) -> Result<DirLoad> {
    let mut load = DirLoad::default();
    for (id, path) in list_pngs(dir)? {
        match read_png(&path).and_then(|px| ImageSample::new(id.clone(), px, tag, source)) {
            Ok(s) => load.samples.push(s),
            Err(e) => load.errors.push((id, e.to_string())),
        }
    }
    Ok(load)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(Image::new(1, 1, vec![0.0, 1.2, 0.0]).is_err());
        assert!(Image::new(1, 1, vec![0.0, 0.5, 1.0]).is_ok());
    }

    #[test]
    fn sample_requires_min_side() {
        let small = Image::filled(4, 16, 0.5).unwrap();
        assert!(ImageSample::new("a", small, None, Source::Real).is_err());
    }

    #[test]
    fn pair_shapes_must_match() {
        let d = ImageSample::new("a", Image::filled(8, 8, 0.5).unwrap(), None, Source::Synthetic).unwrap();
        let c = ImageSample::new("a", Image::filled(8, 9, 0.5).unwrap(), None, Source::Synthetic).unwrap();
        assert!(LabeledPair::new(d, c).is_err());
    }

    #[test]
    fn unlabeled_rejects_duplicates_and_synthetic() {
        let img = Image::filled(8, 8, 0.2).unwrap();
        let a = ImageSample::new("a", img.clone(), None, Source::Real).unwrap();
        let s = ImageSample::new("b", img, None, Source::Synthetic).unwrap();
        assert!(UnlabeledSet::new(vec![a.clone(), a.clone()]).is_err());
        assert!(UnlabeledSet::new(vec![a, s]).is_err());
    }

    #[test]
    fn png16_round_trip_is_exact_on_grid() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(9, 11, |y, x, c| ((y * 31 + x * 7 + c) % 17) as f64 / 16.3)
            .unwrap()
            .quantized16();
        let path = dir.path().join("a.png");
        write_png16(&path, &img).unwrap();
        assert_eq!(read_png(&path).unwrap(), img);
    }

    #[test]
    fn ids_must_be_file_safe() {
        assert!(validate_id("img_001-a.b").is_ok());
        assert!(validate_id("../x").is_err());
        assert!(validate_id("").is_err());
    }
}
