use tdstereo_tensor::Tensor;

use crate::error::{invalid, Result};

/// Horizontal pixel offsets in the units of the map's own resolution, with a
/// 0/1 validity mask of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    values: Tensor,
    valid: Tensor,
}

impl DisparityMap {
    pub fn new(values: Tensor, valid: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(invalid(format!(
                "disparity map must be H×W, got shape {:?}",
                values.shape()
            )));
        }
        if values.shape() != valid.shape() {
            return Err(invalid(format!(
                "validity mask shape {:?} differs from values {:?}",
                valid.shape(),
                values.shape()
            )));
        }
        for (i, (&v, &m)) in values.data().iter().zip(valid.data()).enumerate() {
            if m != 0.0 && m != 1.0 {
                return Err(invalid(format!("validity mask entry {i} is {m}, expected 0 or 1")));
            }
            if m == 1.0 && !(v.is_finite() && v >= 0.0) {
                return Err(invalid(format!("valid disparity at index {i} is {v}")));
            }
        }
        Ok(Self { values, valid })
    }

    /// A map valid everywhere.
    pub fn dense(values: Tensor) -> Result<Self> {
        let valid = Tensor::ones(values.shape().to_vec());
        Self::new(values, valid)
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::dense(Tensor::full(vec![height, width], value))
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn valid(&self) -> &Tensor {
        &self.valid
    }

    pub fn into_parts(self) -> (Tensor, Tensor) {
        (self.values, self.valid)
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values.data()[y * self.width() + x]
    }

    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.valid.data()[y * self.width() + x] == 1.0
    }

    pub fn valid_count(&self) -> usize {
        self.valid.data().iter().filter(|&&m| m == 1.0).count()
    }

    /// Keeps only pixels for which `keep(index)` is true in addition to the
    /// existing mask.
    pub fn masked(&self, mut keep: impl FnMut(usize) -> bool) -> Self {
        let valid = Tensor::from_fn(self.valid.shape().to_vec(), |i| {
            if self.valid.data()[i] == 1.0 && keep(i) {
                1.0
            } else {
                0.0
            }
        });
        Self {
            values: self.values.clone(),
            valid,
        }
    }

    /// Copies rows `0..height` and columns `0..width`.
    pub fn crop(&self, height: usize, width: usize) -> Result<Self> {
        if height > self.height() || width > self.width() {
            return Err(invalid(format!(
                "cannot crop {}×{} map to {height}×{width}",
                self.height(),
                self.width()
            )));
        }
        let w = self.width();
        let pick = |t: &Tensor| Tensor::from_fn(vec![height, width], |i| t.data()[(i / width) * w + i % width]);
        Ok(Self {
            values: pick(&self.values),
            valid: pick(&self.valid),
        })
    }

    /// Valid-aware average pooling over `f×f` blocks, divided by `f` so the
    /// result is expressed in the pooled resolution's pixel units. A block
    /// without any valid pixel is invalid.
    pub fn downsample(&self, f: usize) -> Result<Self> {
        if f == 0 || self.height() % f != 0 || self.width() % f != 0 {
            return Err(invalid(format!(
                "{}×{} map is not divisible by {f}",
                self.height(),
                self.width()
            )));
        }
        let (h, w) = (self.height() / f, self.width() / f);
        let mut values = vec![0.0; h * w];
        let mut valid = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut sum, mut n) = (0.0, 0usize);
                for dy in 0..f {
                    for dx in 0..f {
                        let (yy, xx) = (y * f + dy, x * f + dx);
                        if self.is_valid(yy, xx) {
                            sum += self.get(yy, xx);
                            n += 1;
                        }
                    }
                }
                if n > 0 {
                    values[y * w + x] = sum / n as f64 / f as f64;
                    valid[y * w + x] = 1.0;
                }
            }
        }
        Self::new(Tensor::new(vec![h, w], values)?, Tensor::new(vec![h, w], valid)?)
    }
}
