use crate::error::{shape_err, Error, Result};

/// Single-channel ERP depth in meters with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    /// Row-major `H × W`.
    pub values: Vec<f64>,
    pub valid_mask: Vec<bool>,
}

impl DepthMap {
    /// A map whose finite entries are all valid.
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        let mask = values.iter().map(|v| v.is_finite()).collect();
        Self::with_mask(width, height, values, mask)
    }

    pub fn with_mask(
        width: usize,
        height: usize,
        values: Vec<f64>,
        valid_mask: Vec<bool>,
    ) -> Result<Self> {
        let n = width * height;
        if n == 0 || values.len() != n || valid_mask.len() != n {
            return Err(shape_err(
                "DepthMap",
                format!(
                    "{width}x{height} with {} values and {} mask entries",
                    values.len(),
                    valid_mask.len()
                ),
            ));
        }
        if values.iter().zip(&valid_mask).any(|(v, &m)| m && !v.is_finite()) {
            return Err(Error::NonFinite("valid depth values"));
        }
        Ok(Self {
            width,
            height,
            values,
            valid_mask,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn valid_at(&self, row: usize, col: usize) -> bool {
        self.valid_mask[row * self.width + col]
    }

    pub fn valid_count(&self) -> usize {
        self.valid_mask.iter().filter(|&&m| m).count()
    }

    pub(crate) fn check_pair(&self, other: &DepthMap, op: &'static str) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(shape_err(
                op,
                format!(
                    "{}x{} vs {}x{}",
                    self.width, self.height, other.width, other.height
                ),
            ));
        }
        Ok(())
    }

    /// Elementwise AND of both masks.
    pub(crate) fn joint_mask(&self, other: &DepthMap) -> Vec<bool> {
        self.valid_mask
            .iter()
            .zip(&other.valid_mask)
            .map(|(a, b)| *a && *b)
            .collect()
    }

    pub fn min_max(&self) -> Option<(f64, f64)> {
        self.values
            .iter()
            .zip(&self.valid_mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| *v)
            .fold(None, |acc, v| match acc {
                None => Some((v, v)),
                Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
            })
    }
}
