//! Per-bundle state shared by evaluation, sweeps and analysis: the optional
//! clip threshold, the contribution matrix and, for Mahalanobis scoring,
//! the fitted class statistics. Masks for any method and `p` are cut from
//! the same contribution matrix.

use serde::{Deserialize, Serialize};

use crate::baselines::{make_mask, SparsifierKind, SparsifierSpec};
use crate::dice::{argmax, compute_contribution, forward_batch, ContributionMatrix, Mask};
use crate::error::{DiceError, Result};
use crate::metrics::{detect, distribution_stats, DetectionResult, DistributionStats};
use crate::model_io::Bundle;
use crate::scoring::{
    fit_mahalanobis, react_clip_set, react_fit, GaussianClassStats, ReactThreshold, ScoreKind,
    ScorePipeline, ScoreVector, DEFAULT_SHRINKAGE,
};
use crate::tensor::FeatureSet;

/// Which training features feed the contribution matrix when clipping is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContributionSource {
    #[default]
    Clipped,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOptions {
    pub score: ScoreKind,
    /// Clip percentile, or `None` to disable clipping.
    pub react_percentile: Option<f64>,
    pub contribution_source: ContributionSource,
    pub shrinkage: f64,
}

impl ExperimentOptions {
    pub fn new(score: ScoreKind) -> Self {
        Self {
            score,
            react_percentile: None,
            contribution_source: ContributionSource::Clipped,
            shrinkage: DEFAULT_SHRINKAGE,
        }
    }
}

pub struct Experiment<'a> {
    pub bundle: &'a Bundle,
    pub options: ExperimentOptions,
    pub react: Option<ReactThreshold>,
    pub contribution: ContributionMatrix,
    pub gaussian: Option<GaussianClassStats>,
}

/// Per-OOD-set outcome of one (method, p) cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetResult {
    pub detection: DetectionResult,
    pub stats: DistributionStats,
}

impl<'a> Experiment<'a> {
    pub fn new(bundle: &'a Bundle, options: ExperimentOptions) -> Result<Self> {
        bundle.check()?;
        // the clip threshold is calibrated on ID training activations
        let react = options
            .react_percentile
            .map(|rho| react_fit(&bundle.train, rho))
            .transpose()?;
        let clipped_train = react.as_ref().map(|t| react_clip_set(&bundle.train, t));
        let estimation = match (options.contribution_source, &clipped_train) {
            (ContributionSource::Clipped, Some(c)) => c,
            _ => &bundle.train,
        };
        let contribution = compute_contribution(&bundle.layer, estimation)?;
        let gaussian = if options.score == ScoreKind::Mahalanobis {
            let fit_on = clipped_train.as_ref().unwrap_or(&bundle.train);
            if fit_on.labels().is_none() {
                return Err(DiceError::Config(
                    "mahalanobis scoring needs labeled training features (labels_train)".into(),
                ));
            }
            Some(fit_mahalanobis(
                fit_on,
                bundle.layer.classes(),
                options.shrinkage,
            )?)
        } else {
            None
        };
        Ok(Self {
            bundle,
            options,
            react,
            contribution,
            gaussian,
        })
    }

    pub fn mask(&self, kind: SparsifierKind, p: f64, seed: u64) -> Result<Mask> {
        make_mask(
            &SparsifierSpec::new(kind, p, seed),
            &self.contribution,
            &self.bundle.layer,
        )
    }

    pub fn pipeline<'m>(&'m self, mask: &'m Mask) -> ScorePipeline<'m> {
        ScorePipeline::new(&self.bundle.layer, self.options.score)
            .with_mask(Some(mask))
            .with_react(self.react.as_ref())
            .with_gaussian(self.gaussian.as_ref())
    }

    pub fn scores(&self, mask: &Mask, set: &FeatureSet) -> Result<ScoreVector> {
        self.pipeline(mask).score(set)
    }

    pub fn evaluate_set(
        &self,
        mask: &Mask,
        id_scores: &ScoreVector,
        ood: &FeatureSet,
    ) -> Result<SetResult> {
        let ood_scores = self.scores(mask, ood)?;
        Ok(SetResult {
            detection: detect(id_scores.values(), ood_scores.values())?,
            stats: distribution_stats(&self.pipeline(mask), &self.bundle.id_test, ood)?,
        })
    }

    /// Detection against a validation set (Gaussian-noise features or a
    /// named OOD set).
    pub fn validate(&self, mask: &Mask, validation: &FeatureSet) -> Result<DetectionResult> {
        let id = self.scores(mask, &self.bundle.id_test)?;
        let v = self.scores(mask, validation)?;
        detect(id.values(), v.values())
    }

    /// Top-1 accuracy on the labeled ID test set from the dense layer.
    /// Sparsification only enters the OOD score, so this never depends on
    /// the method or `p`.
    pub fn id_accuracy(&self) -> Result<Option<f64>> {
        id_accuracy(self.bundle)
    }
}

pub fn id_accuracy(bundle: &Bundle) -> Result<Option<f64>> {
    let Some(labels) = bundle.id_test.labels() else {
        return Ok(None);
    };
    let logits = forward_batch(&bundle.layer, None, bundle.id_test.features())?;
    let correct = logits
        .iter_rows()
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(Some(correct as f64 / labels.len() as f64))
}

/// One row of a validation sweep over `p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub p: f64,
    pub k: usize,
    pub fpr95: f64,
    pub auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PSweep {
    pub best_p: f64,
    pub points: Vec<SweepPoint>,
}

/// Scores ID test against `validation` for every `p` and picks the one with
/// the lowest FPR95, preferring the smaller `p` on ties.
pub fn sweep_p(
    exp: &Experiment<'_>,
    kind: SparsifierKind,
    p_grid: &[f64],
    seed: u64,
    validation: &FeatureSet,
) -> Result<PSweep> {
    if p_grid.is_empty() {
        return Err(DiceError::Config("p grid is empty".into()));
    }
    let mut points = Vec::with_capacity(p_grid.len());
    for &p in p_grid {
        let mask = exp.mask(kind, p, seed)?;
        let d = exp.validate(&mask, validation)?;
        points.push(SweepPoint {
            p,
            k: mask.popcount(),
            fpr95: d.fpr95,
            auroc: d.auroc,
        });
    }
    let best = points
        .iter()
        .min_by(|a, b| a.fpr95.total_cmp(&b.fpr95).then(a.p.total_cmp(&b.p)))
        .expect("non-empty grid");
    Ok(PSweep {
        best_p: best.p,
        points,
    })
}
