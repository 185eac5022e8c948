//! Dense containers shared by every stage of the pipeline.

use crate::error::{DiceError, Result};

/// Row-major matrix of `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Tensor2D {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        let expected = rows
            .checked_mul(cols)
            .ok_or_else(|| DiceError::Format(format!("shape [{rows}, {cols}] overflows")))?;
        if data.len() != expected {
            return Err(DiceError::Format(format!(
                "shape [{rows}, {cols}] needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a tensor from equally long rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(DiceError::Format(format!(
                    "row {i} has {} values, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        // chunks_exact on a zero-width tensor would panic
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Position of the first non-finite value, as (row, col).
    pub fn first_non_finite(&self) -> Option<(usize, usize)> {
        self.data
            .iter()
            .position(|v| !v.is_finite())
            .map(|i| (i / self.cols.max(1), i % self.cols.max(1)))
    }

    /// Copy containing only the listed rows, in the listed order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }
}

/// Final affine layer: `W` is `m×C` (units × classes), `b` has `C` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalLayer {
    weight: Tensor2D,
    bias: Vec<f32>,
}

impl FinalLayer {
    pub fn new(weight: Tensor2D, bias: Vec<f32>) -> Result<Self> {
        if weight.rows() < 1 {
            return Err(DiceError::Shape(
                "final layer needs at least one unit".into(),
            ));
        }
        if weight.cols() < 2 {
            return Err(DiceError::Shape(format!(
                "final layer needs at least two classes, got {}",
                weight.cols()
            )));
        }
        if bias.len() != weight.cols() {
            return Err(DiceError::Shape(format!(
                "bias has {} entries but W has {} classes",
                bias.len(),
                weight.cols()
            )));
        }
        if !weight.is_finite() || bias.iter().any(|v| !v.is_finite()) {
            return Err(DiceError::Data(
                "final layer contains non-finite values".into(),
            ));
        }
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Tensor2D {
        &self.weight
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    /// Number of penultimate units `m`.
    pub fn units(&self) -> usize {
        self.weight.rows()
    }

    /// Number of classes `C`.
    pub fn classes(&self) -> usize {
        self.weight.cols()
    }
}

/// `n×m` penultimate activations with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    features: Tensor2D,
    labels: Option<Vec<usize>>,
}

impl FeatureSet {
    pub fn new(features: Tensor2D, labels: Option<Vec<usize>>) -> Result<Self> {
        if features.rows() < 1 {
            return Err(DiceError::Data(
                "feature set must contain at least one sample".into(),
            ));
        }
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(DiceError::Shape(format!(
                    "{} labels for {} samples",
                    l.len(),
                    features.rows()
                )));
            }
        }
        Ok(Self { features, labels })
    }

    pub fn unlabeled(features: Tensor2D) -> Result<Self> {
        Self::new(features, None)
    }

    pub fn features(&self) -> &Tensor2D {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        self.features.row(i)
    }

    /// Checks that the feature width matches the layer and every label is a
    /// valid class.
    pub fn check_against(&self, layer: &FinalLayer) -> Result<()> {
        if self.dim() != layer.units() {
            return Err(DiceError::Shape(format!(
                "features have width {} but the layer expects {}",
                self.dim(),
                layer.units()
            )));
        }
        if let Some(labels) = &self.labels {
            if let Some(bad) = labels.iter().find(|&&l| l >= layer.classes()) {
                return Err(DiceError::Data(format!(
                    "label {bad} out of range for {} classes",
                    layer.classes()
                )));
            }
        }
        Ok(())
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(idx),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }

    pub(crate) fn with_features(&self, features: Tensor2D) -> Self {
        Self {
            features,
            labels: self.labels.clone(),
        }
    }
}
