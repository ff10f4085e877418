//! Named scalar coefficients and raster files.

use std::f64::consts::PI;
use std::path::Path;

use crate::geometry::Point;

fn sin_product(p: Point, eps: f64) -> f64 {
    (2.0 * PI * p[0] / eps).sin() * (2.0 * PI * p[1] / eps).sin()
}

/// `(11/2 + s(eps1) + 4 s(eps2))^-1` with `s(e) = sin(2 pi x1/e) sin(2 pi x2/e)`.
pub fn exp1_twofreq(eps1: f64, eps2: f64) -> impl Fn(Point) -> f64 + Sync {
    move |p| 1.0 / (5.5 + sin_product(p, eps1) + 4.0 * sin_product(p, eps2))
}

/// `(5 + 4 s(eps))^-1`.
pub fn exp2_resonance(eps: f64) -> impl Fn(Point) -> f64 + Sync {
    move |p| 1.0 / (5.0 + 4.0 * sin_product(p, eps))
}

/// Layers in `x1` of period `eps`: `high` on the middle half of each period.
/// The phase makes every period point symmetric about its center.
pub fn laminate(eps: f64, low: f64, high: f64) -> impl Fn(Point) -> f64 + Sync {
    move |p| {
        let y = (p[0] / eps).rem_euclid(1.0);
        if (0.25..0.75).contains(&y) {
            high
        } else {
            low
        }
    }
}

/// Checkerboard of period `eps` with four squares per period.
pub fn checkerboard(eps: f64, low: f64, high: f64) -> impl Fn(Point) -> f64 + Sync {
    move |p| {
        let i = (2.0 * p[0] / eps).floor() as i64;
        let j = (2.0 * p[1] / eps).floor() as i64;
        if (i + j).rem_euclid(2) == 0 {
            low
        } else {
            high
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RasterError {
    #[error("raster i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("raster format: {0}")]
    Format(String),
}

/// Row-major scalar grid on the unit square; row 0 sits at `y = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Raster {
    pub fn parse(text: &str) -> Result<Self, RasterError> {
        let mut tokens = text.split_whitespace();
        let mut dim = |name: &str| -> Result<usize, RasterError> {
            tokens
                .next()
                .ok_or_else(|| RasterError::Format(format!("missing {name}")))?
                .parse()
                .map_err(|e| RasterError::Format(format!("{name}: {e}")))
        };
        let (rows, cols) = (dim("rows")?, dim("cols")?);
        if rows == 0 || cols == 0 {
            return Err(RasterError::Format("empty raster".into()));
        }
        let values = tokens
            .map(|t| t.parse::<f64>().map_err(|e| RasterError::Format(format!("value {t:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if values.len() != rows * cols {
            return Err(RasterError::Format(format!(
                "expected {} values, found {}",
                rows * cols,
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn read(path: &Path) -> Result<Self, RasterError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn eval(&self, p: Point) -> f64 {
        let c = ((p[0] * self.cols as f64) as usize).min(self.cols - 1);
        let r = ((p[1] * self.rows as f64) as usize).min(self.rows - 1);
        self.values[r * self.cols + c]
    }
}
