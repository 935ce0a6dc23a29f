//! Line-oriented `key=value` configuration and 8-bit image files.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::{ColorType, DynamicImage, ImageFormat};
use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered `key=value` settings. Blank lines and `#` comments are ignored.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: IndexMap<String, String>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KvConfig::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            kv.entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(kv)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string())?;
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl fmt::Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Config(format!("missing key `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::Config(format!("bad value for `{key}`: `{raw}`")))
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        if self.contains(key) {
            self.require(key)
        } else {
            Ok(default)
        }
    }

    /// Entries of `other` replace entries of `self`.
    pub fn merge(&mut self, other: &KvConfig) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl fmt::Display for KvConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

/// 8-bit value for a pixel in `[0, 1]`; out-of-range values are clipped, halves round up.
pub fn quantize(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

pub fn dequantize(q: u8) -> f64 {
    q as f64 / 255.0
}

/// Reads an 8-bit PNG or PGM/PPM into `[H, W, ch]` with values in `[0, 1]`.
/// Alpha is dropped; grayscale stays single-channel.
pub fn read_image(path: &Path) -> Result<Tensor<f64>> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (ch, bytes) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw()),
        DynamicImage::ImageLumaA8(_) => (1, img.to_luma8().into_raw()),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw()),
        DynamicImage::ImageRgba8(_) => (3, img.to_rgb8().into_raw()),
        other => {
            return Err(Error::Image(format!(
                "{}: unsupported pixel format {:?} (8-bit only)",
                path.display(),
                other.color()
            )))
        }
    };
    Tensor::new(vec![h, w, ch], bytes.into_iter().map(dequantize).collect())
}

/// Writes `[H, W, ch]` (ch 1 or 3) as PNG, or as PGM/PPM for `.pgm`/`.ppm`/`.pnm`.
pub fn write_image(path: &Path, img: &Tensor<f64>) -> Result<()> {
    let &[h, w, ch] = img.shape() else {
        return Err(Error::Image(format!("expected [H, W, ch], got {:?}", img.shape())));
    };
    let color = match ch {
        1 => ColorType::L8,
        3 => ColorType::Rgb8,
        _ => return Err(Error::Image(format!("cannot write {ch}-channel image"))),
    };
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let format = match ext.as_str() {
        "png" => ImageFormat::Png,
        "pgm" | "ppm" | "pnm" => ImageFormat::Pnm,
        _ => return Err(Error::Image(format!("{}: unknown image extension", path.display()))),
    };
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    image::save_buffer_with_format(path, &bytes, w as u32, h as u32, color, format)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Channel average, `[H, W, ch]` to `[H, W, 1]`.
pub fn to_grayscale(img: &Tensor<f64>) -> Result<Tensor<f64>> {
    let &[h, w, ch] = img.shape() else {
        return Err(Error::Image(format!("expected [H, W, ch], got {:?}", img.shape())));
    };
    let data = img
        .data()
        .chunks(ch)
        .map(|px| px.iter().sum::<f64>() / ch as f64)
        .collect();
    Tensor::new(vec![h, w, 1], data)
}
