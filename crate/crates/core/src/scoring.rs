//! OOD scores (higher means more in-distribution): negative energy, maximum
//! softmax probability, class-conditional Mahalanobis, plus percentile
//! activation clipping and the clip → mask → score pipeline.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dice::{forward_batch, Mask};
use crate::error::{DiceError, Result};
use crate::linalg::{cholesky, Cholesky};
use crate::tensor::{FeatureSet, FinalLayer, Tensor2D};

/// One score per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DiceError::Numerical(
                "score vector contains non-finite values".into(),
            ));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Single-column tensor, for persisting through `model_io`.
    pub fn to_tensor(&self) -> Tensor2D {
        Tensor2D::new(self.0.len(), 1, self.0.iter().map(|&v| v as f32).collect()).expect("column")
    }
}

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(DiceError::Shape("empty logit vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(DiceError::Data("non-finite logit".into()));
    }
    Ok(())
}

fn max_of(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `log Σ exp(f_c)`, the negative free energy.
pub fn energy_score(logits: &[f64]) -> Result<f64> {
    check_logits(logits)?;
    let m = max_of(logits);
    let s: f64 = logits.iter().map(|&z| (z - m).exp()).sum();
    Ok(m + s.ln())
}

/// `max_c softmax(f)_c`.
pub fn msp_score(logits: &[f64]) -> Result<f64> {
    check_logits(logits)?;
    if logits.len() < 2 {
        return Err(DiceError::Shape("MSP needs at least two classes".into()));
    }
    let m = max_of(logits);
    let s: f64 = logits.iter().map(|&z| (z - m).exp()).sum();
    Ok(1.0 / s)
}

/// Class means and the shared precision of a tied-covariance Gaussian model
/// of the penultimate features.
#[derive(Debug, Clone)]
pub struct GaussianClassStats {
    means: Vec<Vec<f64>>,
    precision: Vec<f64>,
    factor: Cholesky,
}

impl GaussianClassStats {
    /// Builds the model from explicit means and a covariance matrix
    /// (`dim×dim`, row-major).
    pub fn from_parts(means: Vec<Vec<f64>>, covariance: &[f64]) -> Result<Self> {
        let dim = means.first().map_or(0, Vec::len);
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(DiceError::Shape(
                "class means must be non-empty and equally long".into(),
            ));
        }
        if covariance.len() != dim * dim {
            return Err(DiceError::Shape(format!(
                "covariance has {} entries, expected {}",
                covariance.len(),
                dim * dim
            )));
        }
        let factor = cholesky(covariance, dim)?;
        let mut precision = factor.inverse();
        for i in 0..dim {
            for j in (i + 1)..dim {
                let s = 0.5 * (precision[i * dim + j] + precision[j * dim + i]);
                precision[i * dim + j] = s;
                precision[j * dim + i] = s;
            }
        }
        Ok(Self {
            means,
            precision,
            factor,
        })
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    /// `Σ⁻¹`, row-major, symmetric.
    pub fn precision(&self) -> &[f64] {
        &self.precision
    }

    pub fn dim(&self) -> usize {
        self.factor.dim()
    }

    pub fn classes(&self) -> usize {
        self.means.len()
    }
}

pub const DEFAULT_SHRINKAGE: f64 = 1e-6;

/// Fits class means and the pooled within-class covariance (divide by `n`),
/// regularized by `ε·(tr Σ / m)·I`.
pub fn fit_mahalanobis(
    train: &FeatureSet,
    classes: usize,
    shrinkage: f64,
) -> Result<GaussianClassStats> {
    let labels = train
        .labels()
        .ok_or_else(|| DiceError::Data("Mahalanobis fitting needs labeled features".into()))?;
    if !(shrinkage >= 0.0 && shrinkage.is_finite()) {
        return Err(DiceError::Domain(format!(
            "shrinkage {shrinkage} must be finite and ≥ 0"
        )));
    }
    let dim = train.dim();
    let mut counts = vec![0usize; classes];
    let mut means = vec![vec![0.0f64; dim]; classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(DiceError::Data(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        counts[y] += 1;
        for (acc, &x) in means[y].iter_mut().zip(train.sample(i)) {
            *acc += x as f64;
        }
    }
    if let Some((c, &n)) = counts.iter().enumerate().find(|(_, &n)| n < 2) {
        return Err(DiceError::Data(format!(
            "class {c} has {n} samples; need at least 2"
        )));
    }
    for (mean, &n) in means.iter_mut().zip(&counts) {
        mean.iter_mut().for_each(|v| *v /= n as f64);
    }

    let mut cov = vec![0.0f64; dim * dim];
    let mut centered = vec![0.0f64; dim];
    for (i, &y) in labels.iter().enumerate() {
        for ((d, &x), &mu) in centered.iter_mut().zip(train.sample(i)).zip(&means[y]) {
            *d = x as f64 - mu;
        }
        for a in 0..dim {
            let da = centered[a];
            for b in a..dim {
                cov[a * dim + b] += da * centered[b];
            }
        }
    }
    let n = labels.len() as f64;
    for a in 0..dim {
        for b in a..dim {
            let v = cov[a * dim + b] / n;
            cov[a * dim + b] = v;
            cov[b * dim + a] = v;
        }
    }
    let trace: f64 = (0..dim).map(|a| cov[a * dim + a]).sum();
    let ridge = shrinkage * trace / dim as f64;
    for a in 0..dim {
        cov[a * dim + a] += ridge;
    }
    GaussianClassStats::from_parts(means, &cov)
}

/// `max_c −(h−μ_c)ᵀ Σ⁻¹ (h−μ_c)`; never positive.
pub fn mahalanobis_score(stats: &GaussianClassStats, h: &[f32]) -> Result<f64> {
    if h.len() != stats.dim() {
        return Err(DiceError::Shape(format!(
            "feature vector has length {} but the model has dimension {}",
            h.len(),
            stats.dim()
        )));
    }
    let mut diff = vec![0.0f64; h.len()];
    let mut best = f64::NEG_INFINITY;
    for mu in &stats.means {
        for ((d, &x), &m) in diff.iter_mut().zip(h).zip(mu) {
            *d = x as f64 - m;
        }
        let dist = stats.factor.whitened_norm_sq(&diff);
        best = best.max(-dist);
    }
    Ok(best)
}

/// Activation clip value taken at a nearest-rank percentile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReactThreshold {
    pub clip: f32,
    pub percentile: f64,
}

impl ReactThreshold {
    /// Threshold that leaves every activation untouched.
    pub fn disabled() -> Self {
        Self {
            clip: f32::INFINITY,
            percentile: 100.0,
        }
    }
}

pub const DEFAULT_REACT_PERCENTILE: f64 = 90.0;

/// Sorts all `n·m` activations ascending and takes the element at
/// `⌈ρ/100 · n·m⌉ − 1`.
pub fn react_fit(calibration: &FeatureSet, percentile: f64) -> Result<ReactThreshold> {
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(DiceError::Domain(format!(
            "percentile {percentile} outside (0, 100]"
        )));
    }
    let mut values = calibration.features().data().to_vec();
    if values.is_empty() {
        return Err(DiceError::Data("empty calibration set".into()));
    }
    let n = values.len();
    let rank = ((percentile * n as f64) / 100.0).ceil() as usize;
    let idx = rank.clamp(1, n) - 1;
    let (_, nth, _) = values.select_nth_unstable_by(idx, |a, b| a.partial_cmp(b).expect("finite"));
    Ok(ReactThreshold {
        clip: *nth,
        percentile,
    })
}

pub fn react_clip(h: &[f32], t: &ReactThreshold) -> Vec<f32> {
    h.iter().map(|&x| x.min(t.clip)).collect()
}

pub fn react_clip_set(set: &FeatureSet, t: &ReactThreshold) -> FeatureSet {
    let x = set.features();
    let data = x.data().iter().map(|&v| v.min(t.clip)).collect();
    set.with_features(Tensor2D::new(x.rows(), x.cols(), data).expect("same shape"))
}

/// Scoring function applied after the (optionally masked) final layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Energy,
    Msp,
    Mahalanobis,
}

impl ScoreKind {
    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Energy => "energy",
            ScoreKind::Msp => "msp",
            ScoreKind::Mahalanobis => "mahalanobis",
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreKind {
    type Err = DiceError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "energy" => Ok(ScoreKind::Energy),
            "msp" => Ok(ScoreKind::Msp),
            "mahalanobis" => Ok(ScoreKind::Mahalanobis),
            other => Err(DiceError::Config(format!(
                "unknown score {other:?} (expected energy, msp or mahalanobis)"
            ))),
        }
    }
}

/// Clip → mask → score, applied per sample.
#[derive(Debug, Clone, Copy)]
pub struct ScorePipeline<'a> {
    pub layer: &'a FinalLayer,
    pub mask: Option<&'a Mask>,
    pub react: Option<&'a ReactThreshold>,
    pub kind: ScoreKind,
    /// Required for [`ScoreKind::Mahalanobis`], which reads the (clipped)
    /// features directly and ignores the layer and mask.
    pub gaussian: Option<&'a GaussianClassStats>,
}

impl<'a> ScorePipeline<'a> {
    pub fn new(layer: &'a FinalLayer, kind: ScoreKind) -> Self {
        Self {
            layer,
            mask: None,
            react: None,
            kind,
            gaussian: None,
        }
    }

    pub fn with_mask(mut self, mask: Option<&'a Mask>) -> Self {
        self.mask = mask;
        self
    }

    pub fn with_react(mut self, react: Option<&'a ReactThreshold>) -> Self {
        self.react = react;
        self
    }

    pub fn with_gaussian(mut self, stats: Option<&'a GaussianClassStats>) -> Self {
        self.gaussian = stats;
        self
    }

    pub fn score(&self, features: &FeatureSet) -> Result<ScoreVector> {
        let clipped;
        let features = match self.react {
            Some(t) => {
                clipped = react_clip_set(features, t);
                &clipped
            }
            None => features,
        };
        let values = match self.kind {
            ScoreKind::Mahalanobis => {
                let stats = self.gaussian.ok_or_else(|| {
                    DiceError::Config("mahalanobis scoring needs fitted class statistics".into())
                })?;
                (0..features.len())
                    .into_par_iter()
                    .map(|i| mahalanobis_score(stats, features.sample(i)))
                    .collect::<Result<Vec<_>>>()?
            }
            ScoreKind::Energy | ScoreKind::Msp => {
                let logits = forward_batch(self.layer, self.mask, features.features())?;
                let f = if self.kind == ScoreKind::Energy {
                    energy_score
                } else {
                    msp_score
                };
                (0..logits.len())
                    .into_par_iter()
                    .map(|i| f(logits.row(i)))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        ScoreVector::new(values)
    }
}

/// Free-function form of [`ScorePipeline::score`].
pub fn score_pipeline(
    layer: &FinalLayer,
    mask: Option<&Mask>,
    react: Option<&ReactThreshold>,
    kind: ScoreKind,
    gaussian: Option<&GaussianClassStats>,
    features: &FeatureSet,
) -> Result<ScoreVector> {
    ScorePipeline {
        layer,
        mask,
        react,
        kind,
        gaussian,
    }
    .score(features)
}
