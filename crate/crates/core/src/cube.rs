//! Hyperspectral cube data model.
//!
//! A cube holds `I x J x K` reflectance values in vec order: element
//! `(i, j, k)` lives at `k*I*J + j*I + i`, i.e. each band is stored
//! column-major and bands are outermost. Every other module indexes
//! through [`Dims::vec_index`].
//!
//! On disk a cube is one text header line followed by raw little-endian
//! `f32` values:
//!
//! ```text
//! HSICUBE v1 I=<I> J=<J> K=<K> dtype=f32 range=<unit01|signed11>\n
//! ```

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

const MAGIC: &str = "HSICUBE";
const VERSION: &str = "v1";
const MAX_HEADER_BYTES: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
}

impl Dims {
    pub fn new(height: usize, width: usize, bands: usize) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::Contract(format!(
                "cube dimensions must be positive, got {height}x{width}x{bands}"
            )));
        }
        Ok(Dims {
            height,
            width,
            bands,
        })
    }

    /// Number of pixels in one band.
    pub fn band_len(&self) -> usize {
        self.height * self.width
    }

    /// Total number of voxels `I*J*K`.
    pub fn len(&self) -> usize {
        self.height * self.width * self.bands
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn vec_index(&self, i: usize, j: usize, k: usize) -> Result<usize> {
        if i >= self.height || j >= self.width || k >= self.bands {
            return Err(Error::OutOfBounds { i, j, k, dims: *self });
        }
        Ok(self.index_unchecked(i, j, k))
    }

    #[inline]
    pub fn index_unchecked(&self, i: usize, j: usize, k: usize) -> usize {
        k * self.height * self.width + j * self.height + i
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.bands)
    }
}

impl FromStr for Dims {
    type Err = Error;

    /// Parses `IxJxK`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(['x', 'X']).collect();
        if parts.len() != 3 {
            return Err(Error::Contract(format!(
                "dimensions must look like IxJxK, got `{s}`"
            )));
        }
        let mut out = [0usize; 3];
        for (slot, part) in out.iter_mut().zip(&parts) {
            *slot = part
                .trim()
                .parse()
                .map_err(|_| Error::Contract(format!("bad dimension `{part}` in `{s}`")))?;
        }
        Dims::new(out[0], out[1], out[2])
    }
}

/// Value-range convention of a cube.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RangeTag {
    /// Reflectance in `[0, 1]`; metrics and files.
    Unit01,
    /// `2v - 1`, in `[-1, 1]`; all restoration math runs here.
    Signed11,
}

impl RangeTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            RangeTag::Unit01 => "unit01",
            RangeTag::Signed11 => "signed11",
        }
    }

    fn bounds(&self) -> (f64, f64) {
        match self {
            RangeTag::Unit01 => (0.0, 1.0),
            RangeTag::Signed11 => (-1.0, 1.0),
        }
    }
}

impl fmt::Display for RangeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RangeTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit01" => Ok(RangeTag::Unit01),
            "signed11" => Ok(RangeTag::Signed11),
            other => Err(Error::Header {
                field: "range",
                reason: format!("unknown range tag `{other}`"),
            }),
        }
    }
}

/// Parsed form of the container header line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CubeHeader {
    pub dims: Dims,
    pub range: RangeTag,
    /// Free-form whitespace-free tag, written as a trailing `provenance=` token.
    pub provenance: Option<String>,
}

impl CubeHeader {
    pub fn to_line(&self) -> String {
        let mut line = format!(
            "{MAGIC} {VERSION} I={} J={} K={} dtype=f32 range={}",
            self.dims.height, self.dims.width, self.dims.bands, self.range
        );
        if let Some(p) = &self.provenance {
            line.push_str(" provenance=");
            line.push_str(p);
        }
        line.push('\n');
        line
    }

    pub fn parse(line: &str) -> Result<Self> {
        let mut tokens = line.split_ascii_whitespace();
        if tokens.next() != Some(MAGIC) {
            return Err(Error::Header {
                field: "magic",
                reason: format!("expected `{MAGIC}`"),
            });
        }
        match tokens.next() {
            Some(VERSION) => {}
            other => {
                return Err(Error::Header {
                    field: "version",
                    reason: format!("expected `{VERSION}`, got {other:?}"),
                })
            }
        }

        let mut height = None;
        let mut width = None;
        let mut bands = None;
        let mut dtype = None;
        let mut range = None;
        let mut provenance = None;
        for token in tokens {
            let (key, value) = token.split_once('=').ok_or_else(|| Error::Header {
                field: "token",
                reason: format!("expected key=value, got `{token}`"),
            })?;
            match key {
                "I" => height = Some(parse_dim("I", value)?),
                "J" => width = Some(parse_dim("J", value)?),
                "K" => bands = Some(parse_dim("K", value)?),
                "dtype" => dtype = Some(value),
                "range" => range = Some(value.parse::<RangeTag>()?),
                "provenance" => provenance = Some(value.to_string()),
                _ => {
                    return Err(Error::Header {
                        field: "token",
                        reason: format!("unknown key `{key}`"),
                    })
                }
            }
        }

        match dtype {
            Some("f32") => {}
            Some(other) => {
                return Err(Error::Header {
                    field: "dtype",
                    reason: format!("unsupported dtype marker `{other}`"),
                })
            }
            None => {
                return Err(Error::Header {
                    field: "dtype",
                    reason: "missing".into(),
                })
            }
        }
        let missing = |field: &'static str| Error::Header {
            field,
            reason: "missing".into(),
        };
        Ok(CubeHeader {
            dims: Dims {
                height: height.ok_or_else(|| missing("I"))?,
                width: width.ok_or_else(|| missing("J"))?,
                bands: bands.ok_or_else(|| missing("K"))?,
            },
            range: range.ok_or_else(|| missing("range"))?,
            provenance,
        })
    }
}

fn parse_dim(field: &'static str, value: &str) -> Result<usize> {
    match value.parse::<usize>() {
        Ok(0) => Err(Error::Header {
            field,
            reason: "dimension must be positive".into(),
        }),
        Ok(v) => Ok(v),
        Err(e) => Err(Error::Header {
            field,
            reason: format!("`{value}`: {e}"),
        }),
    }
}

/// An `I x J x K` cube with its range convention.
///
/// Immutable once built; transforms return new cubes.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    dims: Dims,
    values: Vec<f64>,
    range: RangeTag,
}

impl HsiCube {
    /// Builds a clean cube. Every value must lie inside the range tag's interval.
    pub fn new(dims: Dims, values: Vec<f64>, range: RangeTag) -> Result<Self> {
        let cube = Self::observation(dims, values, range)?;
        let (lo, hi) = range.bounds();
        if let Some((idx, v)) = cube
            .values
            .iter()
            .enumerate()
            .find(|(_, v)| !(lo..=hi).contains(*v))
        {
            return Err(Error::Contract(format!(
                "value {v} at index {idx} outside the {range} interval"
            )));
        }
        Ok(cube)
    }

    /// Builds a cube whose values may leave the nominal interval, such as a
    /// noisy observation. Values must still be finite.
    pub fn observation(dims: Dims, values: Vec<f64>, range: RangeTag) -> Result<Self> {
        Dims::new(dims.height, dims.width, dims.bands)?;
        if values.len() != dims.len() {
            return Err(Error::DimensionMismatch {
                context: "cube values",
                expected: dims.len(),
                got: values.len(),
            });
        }
        if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("non-finite value at index {idx}")));
        }
        Ok(HsiCube {
            dims,
            values,
            range,
        })
    }

    pub fn filled(dims: Dims, value: f64, range: RangeTag) -> Result<Self> {
        Self::new(dims, vec![value; dims.len()], range)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn range(&self) -> RangeTag {
        self.range
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> Result<f64> {
        Ok(self.values[self.dims.vec_index(i, j, k)?])
    }

    /// Band `k` as a contiguous column-major `I x J` slice.
    pub fn band(&self, k: usize) -> Result<&[f64]> {
        if k >= self.dims.bands {
            return Err(Error::OutOfBounds {
                i: 0,
                j: 0,
                k,
                dims: self.dims,
            });
        }
        let len = self.dims.band_len();
        Ok(&self.values[k * len..(k + 1) * len])
    }

    /// `v -> 2v - 1`.
    pub fn scale_to_signed(&self) -> Result<HsiCube> {
        if self.range != RangeTag::Unit01 {
            return Err(Error::Contract(format!(
                "scale_to_signed expects a unit01 cube, got {}",
                self.range
            )));
        }
        Ok(HsiCube {
            dims: self.dims,
            values: self.values.iter().map(|v| 2.0 * v - 1.0).collect(),
            range: RangeTag::Signed11,
        })
    }

    /// `v -> (v + 1) / 2`.
    pub fn scale_to_unit(&self) -> Result<HsiCube> {
        if self.range != RangeTag::Signed11 {
            return Err(Error::Contract(format!(
                "scale_to_unit expects a signed11 cube, got {}",
                self.range
            )));
        }
        Ok(HsiCube {
            dims: self.dims,
            values: self.values.iter().map(|v| (v + 1.0) * 0.5).collect(),
            range: RangeTag::Unit01,
        })
    }

    pub fn header(&self) -> CubeHeader {
        CubeHeader {
            dims: self.dims,
            range: self.range,
            provenance: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_bytes_with(&self.header())
    }

    pub fn to_bytes_with(&self, header: &CubeHeader) -> Vec<u8> {
        let line = header.to_line();
        let mut out = Vec::with_capacity(line.len() + 4 * self.values.len());
        out.extend_from_slice(line.as_bytes());
        for v in &self.values {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    /// Decodes a container. Range is not enforced, so observations load too.
    pub fn from_bytes(bytes: &[u8]) -> Result<(HsiCube, CubeHeader)> {
        let scan = &bytes[..bytes.len().min(MAX_HEADER_BYTES)];
        let newline = scan
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| Error::Header {
                field: "header",
                reason: "no terminating newline".into(),
            })?;
        let line = std::str::from_utf8(&bytes[..newline]).map_err(|_| Error::Header {
            field: "header",
            reason: "not valid UTF-8".into(),
        })?;
        let header = CubeHeader::parse(line)?;
        let payload = &bytes[newline + 1..];
        let expected = header.dims.len() * 4;
        if payload.len() < expected {
            return Err(Error::TruncatedPayload {
                expected,
                found: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(Error::TrailingPayload {
                extra: payload.len() - expected,
            });
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let cube = HsiCube::observation(header.dims, values, header.range)?;
        Ok((cube, header))
    }
}

pub fn save_cube(cube: &HsiCube, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&cube.to_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<HsiCube> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    HsiCube::from_bytes(&bytes).map(|(cube, _)| cube)
}

/// Writes band `k` as an 8-bit grayscale PNG, `v -> round(255 * clamp(v, 0, 1))`.
pub fn export_band_png(cube: &HsiCube, k: usize, path: impl AsRef<Path>) -> Result<()> {
    let img = band_to_gray(cube, k)?;
    img.save(path.as_ref())?;
    Ok(())
}

pub fn band_to_gray(cube: &HsiCube, k: usize) -> Result<image::GrayImage> {
    if cube.range() != RangeTag::Unit01 {
        return Err(Error::Contract(format!(
            "png export expects a unit01 cube, got {}",
            cube.range()
        )));
    }
    let band = cube.band(k)?;
    let dims = cube.dims();
    Ok(image::GrayImage::from_fn(
        dims.width as u32,
        dims.height as u32,
        |x, y| {
            let v = band[x as usize * dims.height + y as usize];
            image::Luma([quantize_u8(v)])
        },
    ))
}

/// Round-half-up 8-bit quantization of a unit-range value.
pub fn quantize_u8(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0) + 0.5).floor() as u8
}
