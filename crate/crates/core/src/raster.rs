//! Plain rasters shared by the pipeline: RGB images and label-index masks,
//! plus their PNG encodings.

use std::io::Cursor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("raster {width}x{height} needs {expected} values, got {actual}")]
    Length {
        width: usize,
        height: usize,
        expected: usize,
        actual: usize,
    },
    #[error("png encode: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("png decode: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("unsupported png layout: {0}")]
    Layout(String),
}

/// 8-bit RGB raster, row-major, 3 bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, RasterError> {
        let expected = width * height * 3;
        if data.len() != expected {
            return Err(RasterError::Length {
                width,
                height,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_png(&self) -> Result<Vec<u8>, RasterError> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header()?;
            writer.write_image_data(&self.data)?;
        }
        Ok(out)
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self, RasterError> {
        let (info, buf) = decode_png(bytes)?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(RasterError::Layout(format!(
                "expected 8-bit RGB, found {:?}/{:?}",
                info.color_type, info.bit_depth
            )));
        }
        Self::new(info.width as usize, info.height as usize, buf)
    }
}

/// Label-index raster. Index 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, RasterError> {
        let expected = width * height;
        if data.len() != expected {
            return Err(RasterError::Length {
                width,
                height,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn background(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, label: u8) {
        self.data[y * self.width + x] = label;
    }

    /// Number of pixels whose index is `>= num_labels`.
    pub fn out_of_schema(&self, num_labels: usize) -> usize {
        self.data
            .iter()
            .filter(|&&v| v as usize >= num_labels)
            .count()
    }

    /// Palette-indexed PNG. Indices beyond the palette are written as-is; the
    /// PLTE chunk is padded with black so every byte value stays decodable.
    pub fn to_indexed_png(&self, palette: &[[u8; 3]]) -> Result<Vec<u8>, RasterError> {
        let max_index = self.data.iter().copied().max().unwrap_or(0) as usize;
        let entries = palette.len().max(max_index + 1).clamp(1, 256);
        let mut plte = Vec::with_capacity(entries * 3);
        for i in 0..entries {
            plte.extend_from_slice(palette.get(i).unwrap_or(&[0, 0, 0]));
        }
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Indexed);
            enc.set_depth(png::BitDepth::Eight);
            enc.set_palette(plte);
            let mut writer = enc.write_header()?;
            writer.write_image_data(&self.data)?;
        }
        Ok(out)
    }

    /// Decodes an 8-bit indexed or grayscale PNG back into label indices.
    pub fn from_png(bytes: &[u8]) -> Result<Self, RasterError> {
        let (info, buf) = decode_png(bytes)?;
        match (info.color_type, info.bit_depth) {
            (png::ColorType::Indexed, png::BitDepth::Eight)
            | (png::ColorType::Grayscale, png::BitDepth::Eight) => {
                Self::new(info.width as usize, info.height as usize, buf)
            }
            (c, d) => Err(RasterError::Layout(format!(
                "expected 8-bit indexed mask, found {c:?}/{d:?}"
            ))),
        }
    }
}

struct PngInfo {
    width: u32,
    height: u32,
    color_type: png::ColorType,
    bit_depth: png::BitDepth,
}

fn decode_png(bytes: &[u8]) -> Result<(PngInfo, Vec<u8>), RasterError> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    // Keep palette indices raw.
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info()?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| RasterError::Layout("image too large".into()))?;
    let mut buf = vec![0; size];
    let frame = reader.next_frame(&mut buf)?;
    buf.truncate(frame.buffer_size());
    Ok((
        PngInfo {
            width: frame.width,
            height: frame.height,
            color_type: frame.color_type,
            bit_depth: frame.bit_depth,
        },
        buf,
    ))
}
