//! Dense per-pixel displacement fields.
//!
//! A field stores offsets in pixel units; the induced map is
//! `f(x, y) = (x + dx(x, y), y + dy(x, y))`. Sampling through a field clamps
//! coordinates to the image domain.

use ndarray::Array2;

use crate::error::{CqcdError, Result};

/// Per-pixel 2-vector offsets, indexed (row, column).
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub dx: Array2<f64>,
    pub dy: Array2<f64>,
}

impl DisplacementField {
    pub fn new(dx: Array2<f64>, dy: Array2<f64>) -> Result<Self> {
        if dx.dim() != dy.dim() {
            return Err(CqcdError::DimensionMismatch(
                "dx and dy planes disagree on extents".into(),
            ));
        }
        if !dx.iter().chain(dy.iter()).all(|v| v.is_finite()) {
            return Err(CqcdError::InvalidArgument(
                "displacement field contains non-finite offsets".into(),
            ));
        }
        Ok(Self { dx, dy })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            dx: Array2::zeros((height, width)),
            dy: Array2::zeros((height, width)),
        }
    }

    /// (height, width).
    pub fn dim(&self) -> (usize, usize) {
        self.dx.dim()
    }

    pub fn height(&self) -> usize {
        self.dx.dim().0
    }

    pub fn width(&self) -> usize {
        self.dx.dim().1
    }

    /// Mean per-pixel Euclidean magnitude.
    pub fn mean_magnitude(&self) -> f64 {
        let n = self.dx.len() as f64;
        self.dx
            .iter()
            .zip(self.dy.iter())
            .map(|(&u, &v)| (u * u + v * v).sqrt())
            .sum::<f64>()
            / n
    }

    /// Maximum per-pixel Euclidean magnitude.
    pub fn max_magnitude(&self) -> f64 {
        self.dx
            .iter()
            .zip(self.dy.iter())
            .map(|(&u, &v)| (u * u + v * v).sqrt())
            .fold(0.0, f64::max)
    }

    /// Samples the field at subpixel (x, y) with clamped bilinear
    /// interpolation of both components.
    pub fn sample(&self, x: f64, y: f64) -> (f64, f64) {
        let (h, w) = self.dim();
        let x = x.clamp(0.0, (w - 1) as f64);
        let y = y.clamp(0.0, (h - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let lerp = |p: &Array2<f64>| {
            let top = (1.0 - fx) * p[(y0, x0)] + fx * p[(y0, x1)];
            let bottom = (1.0 - fx) * p[(y1, x0)] + fx * p[(y1, x1)];
            (1.0 - fy) * top + fy * bottom
        };
        (lerp(&self.dx), lerp(&self.dy))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructor_validates() {
        assert!(DisplacementField::new(Array2::zeros((4, 4)), Array2::zeros((4, 5))).is_err());
        let mut dx = Array2::zeros((4, 4));
        dx[(0, 0)] = f64::INFINITY;
        assert!(DisplacementField::new(dx, Array2::zeros((4, 4))).is_err());
    }

    #[test]
    fn magnitudes() {
        let mut f = DisplacementField::zeros(4, 4);
        f.dx.fill(3.0);
        f.dy.fill(4.0);
        assert!((f.mean_magnitude() - 5.0).abs() < 1e-15);
        assert!((f.max_magnitude() - 5.0).abs() < 1e-15);
    }

    #[test]
    fn sampling_interpolates_and_clamps() {
        let mut f = DisplacementField::zeros(2, 2);
        f.dx[(0, 0)] = 0.0;
        f.dx[(0, 1)] = 1.0;
        f.dx[(1, 0)] = 0.0;
        f.dx[(1, 1)] = 1.0;
        let (dx, _) = f.sample(0.5, 0.0);
        assert!((dx - 0.5).abs() < 1e-15);
        let (dx, _) = f.sample(10.0, -3.0);
        assert!((dx - 1.0).abs() < 1e-15);
    }
}
