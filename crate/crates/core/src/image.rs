//! Row-major image containers. `(x, y)` is column, row; row 0 is the top.

use crate::error::{Error, Result};

/// Linear depth per pixel plus a validity mask. Equality ignores the
/// stored values of invalid pixels.
#[derive(Clone, Debug)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// A map with every pixel invalid.
    pub fn invalid(width: usize, height: usize) -> Self {
        DepthMap {
            width,
            height,
            values: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    /// Builds a map from raw values; non-finite entries become invalid.
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Shape(format!(
                "{} depth values for a {width}x{height} map",
                values.len()
            )));
        }
        let valid = values.iter().map(|v| v.is_finite()).collect();
        Ok(DepthMap {
            width,
            height,
            values,
            valid,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> Option<f64>) -> Self {
        let mut map = DepthMap::invalid(width, height);
        for y in 0..height {
            for x in 0..width {
                if let Some(z) = f(x, y) {
                    map.set(x, y, z);
                }
            }
        }
        map
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    /// The depth at `(x, y)` if valid.
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = self.index(x, y);
        self.valid[i].then(|| self.values[i])
    }

    /// Stores a depth; a non-finite value marks the pixel invalid.
    pub fn set(&mut self, x: usize, y: usize, z: f64) {
        let i = self.index(x, y);
        self.values[i] = z;
        self.valid[i] = z.is_finite();
    }

    pub fn invalidate(&mut self, x: usize, y: usize) {
        let i = self.index(x, y);
        self.valid[i] = false;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Valid depths in pixel order.
    pub fn valid_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values
            .iter()
            .zip(&self.valid)
            .filter_map(|(v, ok)| ok.then_some(*v))
    }

    /// `(min, max)` over valid pixels.
    pub fn range(&self) -> Option<(f64, f64)> {
        self.valid_values().fold(None, |acc, v| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
        })
    }

    /// Applies `f` to every valid depth; non-finite results invalidate the
    /// pixel.
    pub fn map_valid(&self, f: impl Fn(f64) -> f64) -> DepthMap {
        let mut out = self.clone();
        for i in 0..out.values.len() {
            if out.valid[i] {
                let z = f(out.values[i]);
                out.values[i] = z;
                out.valid[i] = z.is_finite();
            }
        }
        out
    }
}

impl PartialEq for DepthMap {
    fn eq(&self, other: &Self) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.valid == other.valid
            && self
                .values
                .iter()
                .zip(&other.values)
                .zip(&self.valid)
                .all(|((a, b), ok)| !ok || a.to_bits() == b.to_bits())
    }
}

/// RGB image with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorImage {
    width: usize,
    height: usize,
    data: Vec<[f64; 3]>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize) -> Self {
        ColorImage {
            width,
            height,
            data: vec![[0.0; 3]; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, data: Vec<[f64; 3]>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "{} pixels for a {width}x{height} image",
                data.len()
            )));
        }
        if let Some(bad) = data
            .iter()
            .flatten()
            .find(|c| !(c.is_finite() && (0.0..=1.0).contains(*c)))
        {
            return Err(Error::Range(format!("color channel {bad} outside [0, 1]")));
        }
        Ok(ColorImage { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }

    /// Stores a color, clamping channels into `[0, 1]`.
    pub fn set(&mut self, x: usize, y: usize, c: [f64; 3]) {
        self.data[y * self.width + x] = c.map(|v| v.clamp(0.0, 1.0));
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.data
    }

    /// One channel as a plain scalar plane.
    pub fn channel(&self, ch: usize) -> Vec<f64> {
        self.data.iter().map(|p| p[ch]).collect()
    }
}
