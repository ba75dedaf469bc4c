use super::InterpreterError;

/// One keypoint's heat raster, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Heatmap {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// First maximal pixel in row-major order, with its value.
    pub fn argmax(&self) -> (usize, usize, f64) {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width, self.data[best])
    }
}

/// Default heat spread: 2% of the longer side.
pub fn default_sigma(height: usize, width: usize) -> f64 {
    0.02 * height.max(width) as f64
}

#[inline]
pub(crate) fn gaussian_value(px: f64, py: f64, kx: f64, ky: f64, sigma: f64) -> f64 {
    let d2 = (px - kx).powi(2) + (py - ky).powi(2);
    (-d2 / (2.0 * sigma * sigma)).exp()
}

pub fn gaussian_heatmap(
    kp: (f64, f64),
    height: usize,
    width: usize,
    sigma: f64,
) -> Result<Heatmap, InterpreterError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(InterpreterError::Sigma(sigma));
    }
    let (kx, ky) = kp;
    if !(kx >= 0.0 && ky >= 0.0 && kx <= (width as f64 - 1.0) && ky <= (height as f64 - 1.0)) {
        return Err(InterpreterError::KeypointBounds {
            x: kx,
            y: ky,
            width,
            height,
        });
    }
    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            data.push(gaussian_value(x as f64, y as f64, kx, ky, sigma));
        }
    }
    Ok(Heatmap {
        width,
        height,
        data,
    })
}
