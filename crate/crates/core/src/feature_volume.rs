//! Multi-resolution backbone feature maps and the per-pixel feature vectors
//! assembled from them.
//!
//! Every map is stored row-major as `(y, x, channel)` in 32-bit floats. A
//! [`FeatureVolume`] never materializes the upsampled stack; pixel vectors are
//! interpolated on demand, one pixel or one row at a time.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("feature map has a zero dimension ({height}x{width}x{channels})")]
    ZeroSized {
        height: usize,
        width: usize,
        channels: usize,
    },
    #[error("feature map payload has {actual} values, expected {expected}")]
    Length { expected: usize, actual: usize },
    #[error("non-finite feature value at flat index {index}")]
    NonFinite { index: usize },
    #[error("upsample target {target_h}x{target_w} is smaller than source {src_h}x{src_w}")]
    TargetSmaller {
        src_h: usize,
        src_w: usize,
        target_h: usize,
        target_w: usize,
    },
    #[error("feature volume needs at least one map")]
    Empty,
    #[error("map {index} ({h}x{w}) is smaller than the map before it")]
    ResolutionOrder { index: usize, h: usize, w: usize },
    #[error("pixel ({x}, {y}) outside {width}x{height}")]
    OutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
}

/// How coarse maps are brought to the target resolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    Nearest,
    /// Half-pixel-centre alignment with edge clamping.
    #[default]
    Bilinear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self, FeatureError> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(FeatureError::ZeroSized {
                height,
                width,
                channels,
            });
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(FeatureError::Length {
                expected,
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite { index });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds a map by evaluating `f(x, y, channel)` at every entry.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self, FeatureError> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::new(height, width, channels, data)
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
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    fn texel(&self, x: usize, y: usize) -> &[f32] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }
}

/// One sample position along an axis: two source indices and the weight of
/// the second.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn tap(dst: usize, src_len: usize, dst_len: usize, mode: UpsampleMode) -> Tap {
    match mode {
        UpsampleMode::Nearest => {
            let i = dst * src_len / dst_len;
            Tap {
                lo: i,
                hi: i,
                frac: 0.0,
            }
        }
        UpsampleMode::Bilinear => {
            let s = (dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5;
            let s = s.clamp(0.0, (src_len - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src_len - 1);
            Tap {
                lo,
                hi,
                frac: s - lo as f64,
            }
        }
    }
}

fn taps(src_len: usize, dst_len: usize, mode: UpsampleMode) -> Vec<Tap> {
    (0..dst_len).map(|d| tap(d, src_len, dst_len, mode)).collect()
}

/// Writes the interpolated texel of `map` at the given taps into `out`.
#[inline]
fn sample_into(map: &FeatureMap, tx: Tap, ty: Tap, out: &mut [f32]) {
    if tx.frac == 0.0 && ty.frac == 0.0 {
        out.copy_from_slice(map.texel(tx.lo, ty.lo));
        return;
    }
    let a = map.texel(tx.lo, ty.lo);
    let b = map.texel(tx.hi, ty.lo);
    let c = map.texel(tx.lo, ty.hi);
    let d = map.texel(tx.hi, ty.hi);
    let (fx, fy) = (tx.frac, ty.frac);
    for (k, o) in out.iter_mut().enumerate() {
        let top = (1.0 - fx) * a[k] as f64 + fx * b[k] as f64;
        let bottom = (1.0 - fx) * c[k] as f64 + fx * d[k] as f64;
        *o = ((1.0 - fy) * top + fy * bottom) as f32;
    }
}

/// Resamples `map` to `target_h x target_w`.
pub fn upsample(
    map: &FeatureMap,
    target_h: usize,
    target_w: usize,
    mode: UpsampleMode,
) -> Result<FeatureMap, FeatureError> {
    if target_h == 0 || target_w == 0 {
        return Err(FeatureError::ZeroSized {
            height: target_h,
            width: target_w,
            channels: map.channels,
        });
    }
    if target_h < map.height || target_w < map.width {
        return Err(FeatureError::TargetSmaller {
            src_h: map.height,
            src_w: map.width,
            target_h,
            target_w,
        });
    }
    let xt = taps(map.width, target_w, mode);
    let yt = taps(map.height, target_h, mode);
    let c = map.channels;
    let mut data = vec![0f32; target_h * target_w * c];
    for (y, ty) in yt.iter().enumerate() {
        for (x, tx) in xt.iter().enumerate() {
            let start = (y * target_w + x) * c;
            sample_into(map, *tx, *ty, &mut data[start..start + c]);
        }
    }
    Ok(FeatureMap {
        height: target_h,
        width: target_w,
        channels: c,
        data,
    })
}

/// The concatenated feature vector of one pixel at target resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelFeature {
    pub x: usize,
    pub y: usize,
    pub values: Vec<f32>,
}

/// Ordered multi-resolution maps; the last one fixes the target resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    maps: Vec<FeatureMap>,
    dim: usize,
}

impl FeatureVolume {
    pub fn new(maps: Vec<FeatureMap>) -> Result<Self, FeatureError> {
        if maps.is_empty() {
            return Err(FeatureError::Empty);
        }
        for (i, pair) in maps.windows(2).enumerate() {
            let (prev, next) = (&pair[0], &pair[1]);
            if next.height < prev.height || next.width < prev.width {
                return Err(FeatureError::ResolutionOrder {
                    index: i + 1,
                    h: next.height,
                    w: next.width,
                });
            }
        }
        let dim = maps.iter().map(|m| m.channels).sum();
        Ok(Self { maps, dim })
    }

    pub fn maps(&self) -> &[FeatureMap] {
        &self.maps
    }

    pub fn into_maps(self) -> Vec<FeatureMap> {
        self.maps
    }

    /// Total channel count `D`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn height(&self) -> usize {
        self.maps.last().map_or(0, |m| m.height)
    }

    pub fn width(&self) -> usize {
        self.maps.last().map_or(0, |m| m.width)
    }

    pub fn num_pixels(&self) -> usize {
        self.height() * self.width()
    }

    fn check_bounds(&self, x: usize, y: usize) -> Result<(), FeatureError> {
        if x >= self.width() || y >= self.height() {
            return Err(FeatureError::OutOfBounds {
                x,
                y,
                width: self.width(),
                height: self.height(),
            });
        }
        Ok(())
    }

    /// Writes the `D` values of pixel `(x, y)` into `out`.
    pub fn fill_pixel(
        &self,
        x: usize,
        y: usize,
        mode: UpsampleMode,
        out: &mut [f32],
    ) -> Result<(), FeatureError> {
        self.check_bounds(x, y)?;
        assert_eq!(out.len(), self.dim, "output slice must hold D values");
        let (th, tw) = (self.height(), self.width());
        let mut offset = 0;
        for map in &self.maps {
            let tx = tap(x, map.width, tw, mode);
            let ty = tap(y, map.height, th, mode);
            sample_into(map, tx, ty, &mut out[offset..offset + map.channels]);
            offset += map.channels;
        }
        Ok(())
    }

    pub fn pixel_feature(
        &self,
        x: usize,
        y: usize,
        mode: UpsampleMode,
    ) -> Result<PixelFeature, FeatureError> {
        let mut values = vec![0f32; self.dim];
        self.fill_pixel(x, y, mode, &mut values)?;
        Ok(PixelFeature { x, y, values })
    }

    /// Fills `out` (length `width * D`) with the feature vectors of row `y`.
    pub fn fill_row(&self, y: usize, mode: UpsampleMode, out: &mut [f32]) {
        let (th, tw, d) = (self.height(), self.width(), self.dim);
        assert!(y < th, "row {y} outside volume of height {th}");
        assert_eq!(out.len(), tw * d);
        let mut offset = 0;
        for map in &self.maps {
            let ty = tap(y, map.height, th, mode);
            let c = map.channels;
            for x in 0..tw {
                let tx = tap(x, map.width, tw, mode);
                let start = x * d + offset;
                sample_into(map, tx, ty, &mut out[start..start + c]);
            }
            offset += c;
        }
    }

    /// Streams all pixel features in row-major order (y outer, x inner).
    pub fn iter_pixel_features(&self, mode: UpsampleMode) -> PixelFeatures<'_> {
        PixelFeatures {
            volume: self,
            mode,
            row: Vec::new(),
            x: 0,
            y: 0,
        }
    }

    /// Mean of all pixel feature vectors, accumulated in 64-bit.
    pub fn mean_feature(&self, mode: UpsampleMode) -> Vec<f64> {
        let (tw, d) = (self.width(), self.dim);
        let mut sum = vec![0f64; d];
        let mut row = vec![0f32; tw * d];
        for y in 0..self.height() {
            self.fill_row(y, mode, &mut row);
            for px in row.chunks_exact(d) {
                for (s, v) in sum.iter_mut().zip(px) {
                    *s += *v as f64;
                }
            }
        }
        let n = self.num_pixels() as f64;
        sum.iter_mut().for_each(|s| *s /= n);
        sum
    }
}

/// Row-buffered iterator over a volume's pixel features.
pub struct PixelFeatures<'a> {
    volume: &'a FeatureVolume,
    mode: UpsampleMode,
    row: Vec<f32>,
    x: usize,
    y: usize,
}

impl Iterator for PixelFeatures<'_> {
    type Item = PixelFeature;

    fn next(&mut self) -> Option<PixelFeature> {
        let (th, tw, d) = (self.volume.height(), self.volume.width(), self.volume.dim());
        if self.y >= th {
            return None;
        }
        if self.x == 0 {
            self.row.resize(tw * d, 0.0);
            self.volume.fill_row(self.y, self.mode, &mut self.row);
        }
        let values = self.row[self.x * d..(self.x + 1) * d].to_vec();
        let item = PixelFeature {
            x: self.x,
            y: self.y,
            values,
        };
        self.x += 1;
        if self.x == tw {
            self.x = 0;
            self.y += 1;
        }
        Some(item)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let total = self.volume.num_pixels();
        let done = self.y * self.volume.width() + self.x;
        let left = total.saturating_sub(done);
        (left, Some(left))
    }
}

impl ExactSizeIterator for PixelFeatures<'_> {}
