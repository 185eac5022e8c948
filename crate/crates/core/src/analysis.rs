//! Variance structure of the per-unit contributions to one logit.
//!
//! For a fixed class `c`, sample `x` contributes the vector
//! `v(x) = W[·][c] ⊙ h(x)`, whose sum (plus the bias) is the logit
//! `f_c(x)`. Everything here uses population (divide-by-`n`) moments, so the
//! decomposition `Var[Σ vᵢ] = Σ σᵢ² + 2 Σ_{i<j} Cov(vᵢ, vⱼ)` is exact up to
//! rounding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DiceError, Result};
use crate::tensor::{FeatureSet, FinalLayer, Tensor2D};

/// `n × m` matrix with `entry[x][i] = W[i][c] · h_i(x)`, kept in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitContributionSample {
    samples: usize,
    units: usize,
    class: usize,
    data: Vec<f64>,
}

impl UnitContributionSample {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let units = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || units == 0 || rows.iter().any(|r| r.len() != units) {
            return Err(DiceError::Shape(
                "contribution rows must be non-empty and rectangular".into(),
            ));
        }
        Ok(Self {
            samples: rows.len(),
            units,
            class: 0,
            data: rows.concat(),
        })
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn units(&self) -> usize {
        self.units
    }

    pub fn class(&self) -> usize {
        self.class
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.data[x * self.units..(x + 1) * self.units]
    }

    pub fn column(&self, i: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.samples).map(move |x| self.data[x * self.units + i])
    }

    /// Row sums restricted to `units`.
    pub fn partial_sums(&self, units: &[usize]) -> Vec<f64> {
        (0..self.samples)
            .map(|x| {
                let row = self.row(x);
                units.iter().map(|&i| row[i]).sum()
            })
            .collect()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.samples)
            .map(|x| self.row(x).iter().sum())
            .collect()
    }
}

fn check_class(layer: &FinalLayer, class: usize) -> Result<()> {
    if class >= layer.classes() {
        return Err(DiceError::Domain(format!(
            "class {class} out of range for {} classes",
            layer.classes()
        )));
    }
    Ok(())
}

pub fn unit_contributions(
    layer: &FinalLayer,
    features: &FeatureSet,
    class: usize,
) -> Result<UnitContributionSample> {
    check_class(layer, class)?;
    if features.dim() != layer.units() {
        return Err(DiceError::Shape(format!(
            "features have {} columns but W has {} rows",
            features.dim(),
            layer.units()
        )));
    }
    let m = layer.units();
    let w: Vec<f64> = (0..m)
        .map(|i| layer.weight().get(i, class) as f64)
        .collect();
    let data = features
        .features()
        .iter_rows()
        .flat_map(|h| {
            h.iter()
                .zip(&w)
                .map(|(&hi, &wi)| wi * hi as f64)
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(UnitContributionSample {
        samples: features.len(),
        units: m,
        class,
        data,
    })
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Population variance.
pub fn variance(xs: &[f64]) -> f64 {
    mean_var(xs).1
}

/// Per-unit mean and variance of the contributions, plus the units sorted
/// ascending by mean (ties by index).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionProfile {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub order: Vec<usize>,
}

pub fn contribution_profile(
    layer: &FinalLayer,
    features: &FeatureSet,
    class: usize,
) -> Result<ContributionProfile> {
    let contribs = unit_contributions(layer, features, class)?;
    let (mean, var): (Vec<f64>, Vec<f64>) = (0..contribs.units())
        .map(|i| mean_var(&contribs.column(i).collect::<Vec<_>>()))
        .unzip();
    let mut order: Vec<usize> = (0..mean.len()).collect();
    order.sort_by(|&a, &b| mean[a].total_cmp(&mean[b]).then(a.cmp(&b)));
    Ok(ContributionProfile { mean, var, order })
}

/// Symmetric `m × m` population covariance of the contribution columns.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl CovarianceMatrix {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor2D {
        Tensor2D::from_fn(self.dim, self.dim, |i, j| self.get(i, j) as f32)
    }
}

fn require_two(contribs: &UnitContributionSample) -> Result<()> {
    if contribs.samples() < 2 {
        return Err(DiceError::Data(format!(
            "need at least 2 samples for variance estimates, got {}",
            contribs.samples()
        )));
    }
    Ok(())
}

pub fn covariance_matrix(contribs: &UnitContributionSample) -> Result<CovarianceMatrix> {
    require_two(contribs)?;
    let (n, m) = (contribs.samples(), contribs.units());
    let means: Vec<f64> = (0..m)
        .map(|i| contribs.column(i).sum::<f64>() / n as f64)
        .collect();
    let centered: Vec<f64> = (0..n)
        .flat_map(|x| {
            contribs
                .row(x)
                .iter()
                .zip(&means)
                .map(|(v, mu)| v - mu)
                .collect::<Vec<_>>()
        })
        .collect();

    let upper: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            (i..m)
                .map(|j| {
                    (0..n)
                        .map(|x| centered[x * m + i] * centered[x * m + j])
                        .sum::<f64>()
                        / n as f64
                })
                .collect()
        })
        .collect();
    let mut data = vec![0.0; m * m];
    for (i, row) in upper.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            let j = i + off;
            data[i * m + j] = v;
            data[j * m + i] = v;
        }
    }
    Ok(CovarianceMatrix { dim: m, data })
}

/// Variance of the full logit versus the logit restricted to `kept` units.
///
/// `cov_term_full` and `cov_term_kept` are `2 Σ_{i<j} Cov(vᵢ, vⱼ)` over all
/// units and over kept units respectively.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub var_full: f64,
    pub var_dice: f64,
    pub sum_sigma_pruned: f64,
    pub cov_term_full: f64,
    pub cov_term_kept: f64,
    /// `|var_full − (Σσᵢ² + cov_term_full)|`
    pub identity_residual: f64,
    /// `|(var_full − var_dice) − (sum_sigma_pruned + cov_term_full − cov_term_kept)|`
    pub reduction_residual: f64,
}

impl VarianceReport {
    pub fn reduction(&self) -> f64 {
        self.var_full - self.var_dice
    }

    /// Both residuals within `tol · max(1, var_full)`.
    pub fn identities_hold(&self, tol: f64) -> bool {
        let scale = tol * self.var_full.max(1.0);
        self.identity_residual <= scale && self.reduction_residual <= scale
    }
}

pub fn variance_decomposition(
    contribs: &UnitContributionSample,
    kept_units: &[usize],
) -> Result<VarianceReport> {
    require_two(contribs)?;
    let m = contribs.units();
    let mut kept = vec![false; m];
    for &i in kept_units {
        if i >= m {
            return Err(DiceError::Domain(format!(
                "kept unit {i} out of range for {m} units"
            )));
        }
        kept[i] = true;
    }
    let kept_list: Vec<usize> = (0..m).filter(|&i| kept[i]).collect();

    let var_full = variance(&contribs.row_sums());
    let var_dice = variance(&contribs.partial_sums(&kept_list));

    let cov = covariance_matrix(contribs)?;
    let sum_sigma_all: f64 = (0..m).map(|i| cov.get(i, i)).sum();
    let sum_sigma_pruned: f64 = (0..m).filter(|&i| !kept[i]).map(|i| cov.get(i, i)).sum();
    let (mut upper_full, mut upper_kept) = (0.0, 0.0);
    for i in 0..m {
        for j in i + 1..m {
            upper_full += cov.get(i, j);
            if kept[i] && kept[j] {
                upper_kept += cov.get(i, j);
            }
        }
    }
    let cov_term_full = 2.0 * upper_full;
    let cov_term_kept = 2.0 * upper_kept;
    Ok(VarianceReport {
        var_full,
        var_dice,
        sum_sigma_pruned,
        cov_term_full,
        cov_term_kept,
        identity_residual: (var_full - (sum_sigma_all + cov_term_full)).abs(),
        reduction_residual: ((var_full - var_dice)
            - (sum_sigma_pruned + cov_term_full - cov_term_kept))
            .abs(),
    })
}

/// Independent Gaussian units `vᵢ ~ N(1, σᵢ²)`; the first `pruned` units are
/// dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionExperiment {
    pub sigmas: Vec<f64>,
    pub pruned: usize,
    pub seed: u64,
    pub samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReductionCheck {
    pub empirical: f64,
    pub predicted: f64,
    pub standard_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

const BATCHES: usize = 10;
pub const MIN_MONTE_CARLO_SAMPLES: usize = 1000;

/// Draws the experiment and compares the empirical drop in variance from
/// pruning with `Σ_{pruned} σᵢ²`. Passes within three standard errors,
/// estimated from ten independent batches.
pub fn pruning_reduction_check(exp: &ReductionExperiment) -> Result<ReductionCheck> {
    let m = exp.sigmas.len();
    if exp.samples < MIN_MONTE_CARLO_SAMPLES {
        return Err(DiceError::Domain(format!(
            "need at least {MIN_MONTE_CARLO_SAMPLES} samples, got {}",
            exp.samples
        )));
    }
    if m == 0 || exp.pruned > m {
        return Err(DiceError::Domain(format!(
            "cannot prune {} of {m} units",
            exp.pruned
        )));
    }
    if exp.sigmas.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(DiceError::Domain(
            "unit spreads must be finite and non-negative".into(),
        ));
    }

    // one ChaCha stream per batch so batches can be drawn in parallel
    let batches: Vec<(Vec<f64>, Vec<f64>)> = (0..BATCHES)
        .into_par_iter()
        .map(|b| {
            let size = exp.samples / BATCHES + usize::from(b < exp.samples % BATCHES);
            let mut rng = ChaCha8Rng::seed_from_u64(exp.seed);
            rng.set_stream(b as u64);
            let mut full = Vec::with_capacity(size);
            let mut kept = Vec::with_capacity(size);
            for _ in 0..size {
                let (mut f, mut k) = (0.0, 0.0);
                for (i, s) in exp.sigmas.iter().enumerate() {
                    let z: f64 = rng.sample(StandardNormal);
                    let v = 1.0 + s * z;
                    f += v;
                    if i >= exp.pruned {
                        k += v;
                    }
                }
                full.push(f);
                kept.push(k);
            }
            (full, kept)
        })
        .collect();

    let per_batch: Vec<f64> = batches
        .iter()
        .map(|(f, k)| variance(f) - variance(k))
        .collect();
    let all_full: Vec<f64> = batches
        .iter()
        .flat_map(|(f, _)| f.iter().copied())
        .collect();
    let all_kept: Vec<f64> = batches
        .iter()
        .flat_map(|(_, k)| k.iter().copied())
        .collect();
    let var_full = variance(&all_full);
    let empirical = var_full - variance(&all_kept);
    let predicted: f64 = exp.sigmas[..exp.pruned].iter().map(|s| s * s).sum();

    let batch_mean = per_batch.iter().sum::<f64>() / BATCHES as f64;
    let batch_var = per_batch
        .iter()
        .map(|d| (d - batch_mean).powi(2))
        .sum::<f64>()
        / (BATCHES - 1) as f64;
    let standard_error = (batch_var / BATCHES as f64).sqrt();
    // floor for the zero-spread case, where both sides are pure rounding
    let tolerance = 3.0 * standard_error + 1e-9 * var_full.max(1.0);
    Ok(ReductionCheck {
        empirical,
        predicted,
        standard_error,
        tolerance,
        pass: (empirical - predicted).abs() <= tolerance,
    })
}
