//! Flat binary raster files and 8-bit previews.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | field                               |
//! |--------|------|-------------------------------------|
//! | 0      | 4    | magic `b"MBOR"`                     |
//! | 4      | 4    | dtype, `u32`; `1` = IEEE-754 `f32`  |
//! | 8      | 4    | height `H`, `u32`                   |
//! | 12     | 4    | width `W`, `u32`                    |
//! | 16     | 4    | channels `C`, `u32`                 |
//! | 20     | 4·H·W·C | samples, `f32` little-endian     |
//!
//! Samples are row-major with channels interleaved: the sample for
//! `(y, x, c)` sits at index `(y * W + x) * C + c`. Scalar maps use `C = 1`,
//! flows use `C = 2` (`u`, `v`), frames use `C = 3`.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::grids::{Direction, FeatureMap, FlowField, RangeTag, ScalarMap};

pub const MAGIC: [u8; 4] = *b"MBOR";
pub const DTYPE_F32: u32 = 1;
pub const HEADER_LEN: usize = 20;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported dtype {0}")]
    UnsupportedDtype(u32),
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("expected {expected} channels, file has {actual}")]
    Channels { expected: usize, actual: usize },
    #[error("invalid contents: {0}")]
    Invalid(#[from] crate::error::Error),
    #[error("image encoding failed: {0}")]
    Image(#[from] image::ImageError),
}

/// Decoded raster: `height x width x channels` samples, interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&DTYPE_F32.to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.channels as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Raster, RasterError> {
        if bytes.len() < HEADER_LEN {
            return Err(RasterError::Truncated {
                expected: HEADER_LEN,
                actual: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(RasterError::BadMagic(magic));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let dtype = word(4);
        if dtype != DTYPE_F32 {
            return Err(RasterError::UnsupportedDtype(dtype));
        }
        let (height, width, channels) = (word(8) as usize, word(12) as usize, word(16) as usize);
        let n = height * width * channels;
        let expected = HEADER_LEN + 4 * n;
        if bytes.len() != expected {
            return Err(RasterError::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        let data = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Raster {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), RasterError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.encode())?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Raster, RasterError> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Raster::decode(&bytes)
    }

    fn expect_channels(&self, c: usize) -> Result<(), RasterError> {
        if self.channels != c {
            return Err(RasterError::Channels {
                expected: c,
                actual: self.channels,
            });
        }
        Ok(())
    }

    pub fn from_map(m: &ScalarMap) -> Raster {
        Raster {
            height: m.height(),
            width: m.width(),
            channels: 1,
            data: m.values().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_map(&self, range: RangeTag) -> Result<ScalarMap, RasterError> {
        self.expect_channels(1)?;
        Ok(ScalarMap::new(
            self.width,
            self.height,
            self.data.iter().map(|&v| v as f64).collect(),
            range,
        )?)
    }

    pub fn from_flow(f: &FlowField) -> Raster {
        let mut data = Vec::with_capacity(2 * f.u().len());
        for (u, v) in f.u().iter().zip(f.v()) {
            data.push(*u as f32);
            data.push(*v as f32);
        }
        Raster {
            height: f.height(),
            width: f.width(),
            channels: 2,
            data,
        }
    }

    /// The file format carries no direction; the caller supplies it.
    pub fn to_flow(&self, direction: Direction) -> Result<FlowField, RasterError> {
        self.expect_channels(2)?;
        let u = self.data.iter().step_by(2).map(|&v| v as f64).collect();
        let v = self.data.iter().skip(1).step_by(2).map(|&v| v as f64).collect();
        Ok(FlowField::new(self.width, self.height, u, v, direction)?)
    }

    pub fn from_features(f: &FeatureMap) -> Raster {
        let (w, h, c) = (f.width(), f.height(), f.channels());
        let mut data = Vec::with_capacity(w * h * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(f.at(ch, x, y) as f32);
                }
            }
        }
        Raster {
            height: h,
            width: w,
            channels: c,
            data,
        }
    }

    pub fn to_features(&self) -> Result<FeatureMap, RasterError> {
        let (w, h, c) = (self.width, self.height, self.channels);
        Ok(FeatureMap::from_fn(w, h, c, |ch, x, y| {
            self.data[(y * w + x) * c + ch] as f64
        })?)
    }
}

pub fn write_map(path: impl AsRef<Path>, m: &ScalarMap) -> Result<(), RasterError> {
    Raster::from_map(m).write(path)
}

pub fn read_map(path: impl AsRef<Path>, range: RangeTag) -> Result<ScalarMap, RasterError> {
    Raster::read(path)?.to_map(range)
}

pub fn write_flow(path: impl AsRef<Path>, f: &FlowField) -> Result<(), RasterError> {
    Raster::from_flow(f).write(path)
}

pub fn read_flow(path: impl AsRef<Path>, direction: Direction) -> Result<FlowField, RasterError> {
    Raster::read(path)?.to_flow(direction)
}

pub fn write_features(path: impl AsRef<Path>, f: &FeatureMap) -> Result<(), RasterError> {
    Raster::from_features(f).write(path)
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureMap, RasterError> {
    Raster::read(path)?.to_features()
}

fn to_u8(v: f64, lo: f64, hi: f64) -> u8 {
    if hi <= lo {
        return 0;
    }
    (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
}

/// Binary (P5) PGM. Unit maps are scaled from `[0,1]`, other maps from
/// their own min/max.
pub fn pgm_bytes(m: &ScalarMap) -> Vec<u8> {
    let (lo, hi) = match m.range() {
        RangeTag::Unit => (0.0, 1.0),
        _ => min_max(m.values()),
    };
    let mut out = format!("P5\n{} {}\n255\n", m.width(), m.height()).into_bytes();
    out.extend(m.values().iter().map(|&v| to_u8(v, lo, hi)));
    out
}

pub fn write_pgm(path: impl AsRef<Path>, m: &ScalarMap) -> Result<(), RasterError> {
    std::fs::write(path, pgm_bytes(m))?;
    Ok(())
}

pub fn write_png_gray(path: impl AsRef<Path>, m: &ScalarMap) -> Result<(), RasterError> {
    let (lo, hi) = match m.range() {
        RangeTag::Unit => (0.0, 1.0),
        _ => min_max(m.values()),
    };
    let buf: Vec<u8> = m.values().iter().map(|&v| to_u8(v, lo, hi)).collect();
    let img = image::GrayImage::from_raw(m.width() as u32, m.height() as u32, buf)
        .expect("buffer matches dimensions");
    img.save(path)?;
    Ok(())
}

/// First three channels as RGB, values in `[0,1]` clamped.
pub fn write_png_rgb(path: impl AsRef<Path>, f: &FeatureMap) -> Result<(), RasterError> {
    let (w, h) = (f.width(), f.height());
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px: [u8; 3] =
                std::array::from_fn(|c| to_u8(f.at(c.min(f.channels() - 1), x, y), 0.0, 1.0));
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path)?;
    Ok(())
}
