//! Probability grids over image regions and their CSV exchange format.
//!
//! CSV layout: `side` rows of `side` comma-separated decimals, row-major,
//! each row terminated by `\n`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Tolerance for the sum-to-one check.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A `side × side` grid of nonnegative weights summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct GridMap {
    side: usize,
    values: Vec<f64>,
}

/// Attention weights produced by the VQA model.
pub type AttentionMap = GridMap;

impl GridMap {
    /// Validates that `values` already lie on the simplex.
    pub fn new(side: usize, values: Vec<f64>) -> Result<Self> {
        check_len(side, &values)?;
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "map entries must be finite and nonnegative".into(),
            ));
        }
        let s: f64 = values.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidArgument(format!("map sums to {s}, expected 1")));
        }
        Ok(Self { side, values })
    }

    /// Normalizes nonnegative weights; an all-zero input becomes uniform.
    /// The flag reports whether the uniform fallback was taken.
    pub fn normalize(side: usize, mut values: Vec<f64>) -> Result<(Self, bool)> {
        check_len(side, &values)?;
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "weights must be finite and nonnegative".into(),
            ));
        }
        let s: f64 = values.iter().sum();
        if s <= 0.0 {
            let u = 1.0 / values.len() as f64;
            values.iter_mut().for_each(|v| *v = u);
            return Ok((Self { side, values }, true));
        }
        values.iter_mut().for_each(|v| *v /= s);
        Ok((Self { side, values }, false))
    }

    pub fn uniform(side: usize) -> Self {
        let n = side * side;
        Self {
            side,
            values: vec![1.0 / n as f64; n],
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn cells(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.side + col]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for r in 0..self.side {
            for c in 0..self.side {
                if c > 0 {
                    s.push(',');
                }
                // shortest repr that round-trips
                write!(s, "{}", self.at(r, c)).unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// Parses a CSV grid and renormalizes it (tolerating printed rounding).
    pub fn from_csv(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let side = rows.len();
        let mut values = Vec::with_capacity(side * side);
        for (i, row) in rows.iter().enumerate() {
            let cells: Vec<&str> = row.split(',').collect();
            if cells.len() != side {
                return Err(Error::Format(format!(
                    "row {i} has {} cells, expected {side}",
                    cells.len()
                )));
            }
            for c in cells {
                values.push(c.trim().parse::<f64>().map_err(|e| {
                    Error::Format(format!("row {i}: cannot parse {c:?}: {e}"))
                })?);
            }
        }
        if side == 0 {
            return Err(Error::Format("empty map".into()));
        }
        Ok(Self::normalize(side, values)?.0)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

fn check_len(side: usize, values: &[f64]) -> Result<()> {
    if side == 0 || values.len() != side * side {
        return Err(Error::Shape {
            op: "GridMap",
            detail: format!("{} values for a {side}×{side} grid", values.len()),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let (m, _) = GridMap::normalize(2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let text = m.to_csv();
        assert_eq!(text.lines().count(), 2);
        assert!(text.ends_with('\n'));
        let back = GridMap::from_csv(&text).unwrap();
        for (a, b) in back.values().iter().zip(m.values()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_weights_fall_back_to_uniform() {
        let (m, fallback) = GridMap::normalize(2, vec![0.0; 4]).unwrap();
        assert!(fallback);
        assert_eq!(m.values(), &[0.25; 4]);
    }

    #[test]
    fn rejects_off_simplex_and_ragged_csv() {
        assert!(GridMap::new(2, vec![0.5, 0.5, 0.5, 0.5]).is_err());
        assert!(GridMap::from_csv("1,0\n0\n").is_err());
    }
}
