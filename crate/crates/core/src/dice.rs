//! Contribution-directed sparsification of the final layer.
//!
//! The contribution of unit `i` to class `c` is the ID-average of
//! `W[i][c] * h_i(x)`. Keeping only the `k` globally largest contributions
//! gives a binary mask `M`; the sparsified logits are `(M ⊙ W)ᵀ h + b`.
//!
//! Masked and dense evaluation share one accumulation kernel, so an all-ones
//! mask reproduces the dense logits bit for bit.

use rayon::prelude::*;

use crate::error::{DiceError, Result};
use crate::tensor::{FeatureSet, FinalLayer, Tensor2D};

/// Fraction of final-layer weights dropped, `p = 1 − k/(m·C)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct SparsityParam(f64);

impl SparsityParam {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(DiceError::Domain(format!("sparsity p={p} outside [0, 1]")));
        }
        Ok(Self(p))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Number of retained weights for an `m×C` layer.
    pub fn keep_count(self, units: usize, classes: usize) -> usize {
        let total = units * classes;
        let k = ((1.0 - self.0) * total as f64 + 0.5).floor();
        (k.max(0.0) as usize).min(total)
    }
}

/// `k = round((1−p)·m·C)`, half-way cases rounding up, clamped to `[0, m·C]`.
pub fn p_to_k(p: f64, units: usize, classes: usize) -> Result<usize> {
    Ok(SparsityParam::new(p)?.keep_count(units, classes))
}

/// Per-(unit, class) mean contribution, same shape as `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContributionMatrix(Tensor2D);

impl ContributionMatrix {
    pub fn from_tensor(v: Tensor2D) -> Self {
        Self(v)
    }

    pub fn tensor(&self) -> &Tensor2D {
        &self.0
    }

    pub fn units(&self) -> usize {
        self.0.rows()
    }

    pub fn classes(&self) -> usize {
        self.0.cols()
    }

    /// Flat row-major indices ordered by descending contribution; equal
    /// values keep ascending index order.
    pub fn ranking_desc(&self) -> Vec<usize> {
        rank_flat(self.0.data(), Order::Descending)
    }

    /// Flat indices ordered by ascending contribution, ties by index.
    pub fn ranking_asc(&self) -> Vec<usize> {
        rank_flat(self.0.data(), Order::Ascending)
    }
}

#[derive(Clone, Copy)]
pub(crate) enum Order {
    Ascending,
    Descending,
}

pub(crate) fn rank_flat(values: &[f32], order: Order) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    // partial_cmp keeps 0.0 and -0.0 equal; inputs are finite
    idx.sort_by(|&a, &b| {
        let ord = match order {
            Order::Descending => values[b].partial_cmp(&values[a]),
            Order::Ascending => values[a].partial_cmp(&values[b]),
        };
        ord.expect("finite values").then(a.cmp(&b))
    });
    idx
}

/// `V[i][c] = W[i][c] · mean_x h_i(x)`; the bias does not enter.
pub fn contribution_from_weights(
    weight: &Tensor2D,
    features: &Tensor2D,
) -> Result<ContributionMatrix> {
    if features.cols() != weight.rows() {
        return Err(DiceError::Shape(format!(
            "estimation features have width {} but W has {} units",
            features.cols(),
            weight.rows()
        )));
    }
    if features.rows() == 0 {
        return Err(DiceError::Data("empty estimation set".into()));
    }
    let n = features.rows() as f64;
    let mut mean = vec![0.0f64; features.cols()];
    for row in features.iter_rows() {
        for (acc, &h) in mean.iter_mut().zip(row) {
            *acc += h as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);

    let v = Tensor2D::from_fn(weight.rows(), weight.cols(), |i, c| {
        (weight.get(i, c) as f64 * mean[i]) as f32
    });
    Ok(ContributionMatrix(v))
}

pub fn compute_contribution(
    layer: &FinalLayer,
    estimation_set: &FeatureSet,
) -> Result<ContributionMatrix> {
    contribution_from_weights(layer.weight(), estimation_set.features())
}

/// Binary `m×C` selection of retained weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    bits: Tensor2D,
    kept: usize,
}

impl Mask {
    pub fn ones(units: usize, classes: usize) -> Self {
        Self {
            bits: Tensor2D::from_fn(units, classes, |_, _| 1.0),
            kept: units * classes,
        }
    }

    pub fn zeros(units: usize, classes: usize) -> Self {
        Self {
            bits: Tensor2D::zeros(units, classes),
            kept: 0,
        }
    }

    /// Mask with ones at the given flat row-major positions.
    pub fn from_flat_indices(
        units: usize,
        classes: usize,
        idx: impl IntoIterator<Item = usize>,
    ) -> Self {
        let mut mask = Self::zeros(units, classes);
        for i in idx {
            let slot = &mut mask.bits.data_mut()[i];
            if *slot == 0.0 {
                *slot = 1.0;
                mask.kept += 1;
            }
        }
        mask
    }

    pub fn from_tensor(t: Tensor2D) -> Result<Self> {
        let mut kept = 0;
        for &v in t.data() {
            if v == 1.0 {
                kept += 1;
            } else if v != 0.0 {
                return Err(DiceError::Data(format!("mask entry {v} is not 0 or 1")));
            }
        }
        Ok(Self { bits: t, kept })
    }

    pub fn tensor(&self) -> &Tensor2D {
        &self.bits
    }

    pub fn units(&self) -> usize {
        self.bits.rows()
    }

    pub fn classes(&self) -> usize {
        self.bits.cols()
    }

    pub fn popcount(&self) -> usize {
        self.kept
    }

    #[inline]
    pub fn is_kept(&self, unit: usize, class: usize) -> bool {
        self.bits.get(unit, class) == 1.0
    }

    pub fn set_row(&mut self, unit: usize, keep: bool) {
        for c in 0..self.classes() {
            let was = self.is_kept(unit, c);
            if was != keep {
                self.bits.set(unit, c, if keep { 1.0 } else { 0.0 });
                if keep {
                    self.kept += 1;
                } else {
                    self.kept -= 1;
                }
            }
        }
    }

    /// True when every retained weight of `self` is also retained by `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.bits.shape() == other.bits.shape()
            && self
                .bits
                .data()
                .iter()
                .zip(other.bits.data())
                .all(|(&a, &b)| a == 0.0 || b == 1.0)
    }

    /// Units retained for one class, ascending.
    pub fn kept_units(&self, class: usize) -> Vec<usize> {
        (0..self.units())
            .filter(|&i| self.is_kept(i, class))
            .collect()
    }

    /// Fraction of weights dropped.
    pub fn sparsity(&self) -> f64 {
        1.0 - self.kept as f64 / (self.units() * self.classes()) as f64
    }
}

/// Ones at the `k` largest entries of `V` across all classes.
pub fn build_mask(v: &ContributionMatrix, k: usize) -> Result<Mask> {
    let total = v.units() * v.classes();
    if k > total {
        return Err(DiceError::Domain(format!("k={k} exceeds m·C={total}")));
    }
    let order = v.ranking_desc();
    Ok(Mask::from_flat_indices(
        v.units(),
        v.classes(),
        order.into_iter().take(k),
    ))
}

/// Logits for a batch of samples, `n×C`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    classes: usize,
    data: Vec<f64>,
}

impl Logits {
    pub fn len(&self) -> usize {
        self.data.len() / self.classes
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.classes)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn argmax(&self, i: usize) -> usize {
        argmax(self.row(i))
    }
}

/// Index of the largest value, first occurrence on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

// Single kernel for masked and dense evaluation. Accumulation per class is
// left to right over units in f64; the bias is added last.
fn forward_kernel(layer: &FinalLayer, mask: Option<&Mask>, h: &[f32], out: &mut [f64]) {
    let w = layer.weight();
    let classes = layer.classes();
    out.iter_mut().for_each(|o| *o = 0.0);
    for (i, &hi) in h.iter().enumerate() {
        let hi = hi as f64;
        let w_row = w.row(i);
        match mask {
            Some(m) => {
                let m_row = m.bits.row(i);
                for c in 0..classes {
                    out[c] += (m_row[c] * w_row[c]) as f64 * hi;
                }
            }
            None => {
                for c in 0..classes {
                    out[c] += w_row[c] as f64 * hi;
                }
            }
        }
    }
    for (o, &b) in out.iter_mut().zip(layer.bias()) {
        *o += b as f64;
    }
}

fn check_vector(layer: &FinalLayer, h: &[f32]) -> Result<()> {
    if h.len() != layer.units() {
        return Err(DiceError::Shape(format!(
            "feature vector has length {} but the layer has {} units",
            h.len(),
            layer.units()
        )));
    }
    Ok(())
}

fn check_mask(layer: &FinalLayer, mask: &Mask) -> Result<()> {
    if mask.bits.shape() != layer.weight().shape() {
        return Err(DiceError::Shape(format!(
            "mask shape {:?} does not match W shape {:?}",
            mask.bits.shape(),
            layer.weight().shape()
        )));
    }
    Ok(())
}

/// `f = Wᵀh + b`.
pub fn dense_forward(layer: &FinalLayer, h: &[f32]) -> Result<Vec<f64>> {
    check_vector(layer, h)?;
    let mut out = vec![0.0; layer.classes()];
    forward_kernel(layer, None, h, &mut out);
    Ok(out)
}

/// `f = (M ⊙ W)ᵀh + b`.
pub fn dice_forward(layer: &FinalLayer, mask: &Mask, h: &[f32]) -> Result<Vec<f64>> {
    check_vector(layer, h)?;
    check_mask(layer, mask)?;
    let mut out = vec![0.0; layer.classes()];
    forward_kernel(layer, Some(mask), h, &mut out);
    Ok(out)
}

/// Logits for every sample; dense when `mask` is `None`. Samples are
/// evaluated independently, so the result does not depend on the thread
/// count.
pub fn forward_batch(
    layer: &FinalLayer,
    mask: Option<&Mask>,
    features: &Tensor2D,
) -> Result<Logits> {
    if features.cols() != layer.units() {
        return Err(DiceError::Shape(format!(
            "features have width {} but the layer has {} units",
            features.cols(),
            layer.units()
        )));
    }
    if let Some(m) = mask {
        check_mask(layer, m)?;
    }
    let classes = layer.classes();
    let mut data = vec![0.0f64; features.rows() * classes];
    data.par_chunks_mut(classes)
        .enumerate()
        .for_each(|(i, out)| forward_kernel(layer, mask, features.row(i), out));
    Ok(Logits { classes, data })
}
