//! FPR at a target TPR, AUROC, and the output statistics used to compare
//! ID and OOD score distributions.
//!
//! Convention: higher scores mean "in-distribution". A sample is accepted
//! as ID when its score is `≥ λ`; ties at `λ` count as accepted for both
//! populations.

use serde::{Deserialize, Serialize};

use crate::dice::{forward_batch, Logits};
use crate::error::{DiceError, Result};
use crate::scoring::{react_clip_set, ScorePipeline};
use crate::tensor::FeatureSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub fpr95: f64,
    pub auroc: f64,
    pub threshold_lambda: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub mean_id_maxlogit: f64,
    pub mean_ood_maxlogit: f64,
    pub delta: f64,
    pub ood_score_std_normalized: f64,
}

fn check_scores(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(DiceError::Data(format!(
            "need non-empty score sets (got {} ID, {} OOD)",
            id.len(),
            ood.len()
        )));
    }
    if id.iter().chain(ood).any(|v| !v.is_finite()) {
        return Err(DiceError::Data("scores must be finite".into()));
    }
    Ok(())
}

/// Nearest-rank threshold: with ID scores sorted descending,
/// `λ = id[⌈t·n⌉ − 1]`, so at least a fraction `t` of ID scores is `≥ λ`.
/// Returns `(FPR, λ)` where FPR is the fraction of OOD scores `≥ λ`.
pub fn fpr_at_tpr(id: &[f64], ood: &[f64], tpr_target: f64) -> Result<(f64, f64)> {
    check_scores(id, ood)?;
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(DiceError::Domain(format!(
            "TPR target {tpr_target} outside (0, 1]"
        )));
    }
    let mut sorted = id.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    let rank = (tpr_target * sorted.len() as f64).ceil() as usize;
    let lambda = sorted[rank.clamp(1, sorted.len()) - 1];
    let false_pos = ood.iter().filter(|&&s| s >= lambda).count();
    Ok((false_pos as f64 / ood.len() as f64, lambda))
}

/// Mann–Whitney AUROC with half credit for ties, via one sort.
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    check_scores(id, ood)?;
    let mut all: Vec<(f64, bool)> = id
        .iter()
        .map(|&s| (s, true))
        .chain(ood.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite"));

    // twice the U statistic, kept integral so the result is exact
    let mut twice_u: u128 = 0;
    let mut ood_below: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut id_tied, mut ood_tied) = (0u128, 0u128);
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                id_tied += 1;
            } else {
                ood_tied += 1;
            }
            j += 1;
        }
        twice_u += id_tied * (2 * ood_below + ood_tied);
        ood_below += ood_tied;
        i = j;
    }
    let pairs = 2 * id.len() as u128 * ood.len() as u128;
    Ok(twice_u as f64 / pairs as f64)
}

pub fn detect(id: &[f64], ood: &[f64]) -> Result<DetectionResult> {
    let (fpr95, threshold_lambda) = fpr_at_tpr(id, ood, 0.95)?;
    Ok(DetectionResult {
        fpr95,
        auroc: auroc(id, ood)?,
        threshold_lambda,
        n_id: id.len(),
        n_ood: ood.len(),
    })
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn std_pop(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

pub(crate) fn max_logits(logits: &Logits) -> Vec<f64> {
    logits
        .iter_rows()
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Statistics from precomputed logits and scores.
pub fn distribution_stats_from(
    id_logits: &Logits,
    ood_logits: &Logits,
    id_scores: &[f64],
    ood_scores: &[f64],
) -> Result<DistributionStats> {
    check_scores(id_scores, ood_scores)?;
    let mean_id_maxlogit = mean(&max_logits(id_logits));
    let mean_ood_maxlogit = mean(&max_logits(ood_logits));
    let id_mean = mean(id_scores);
    if id_mean == 0.0 {
        return Err(DiceError::Numerical(
            "mean ID score is zero; normalized OOD std is undefined".into(),
        ));
    }
    Ok(DistributionStats {
        mean_id_maxlogit,
        mean_ood_maxlogit,
        delta: mean_id_maxlogit - mean_ood_maxlogit,
        ood_score_std_normalized: std_pop(ood_scores) / id_mean,
    })
}

/// Mean max-logit of ID and OOD under the pipeline's (clipped, masked)
/// layer, their gap, and `std(OOD scores) / mean(ID scores)`.
pub fn distribution_stats(
    pipeline: &ScorePipeline<'_>,
    id: &FeatureSet,
    ood: &FeatureSet,
) -> Result<DistributionStats> {
    let logits_of = |set: &FeatureSet| match pipeline.react {
        Some(t) => forward_batch(
            pipeline.layer,
            pipeline.mask,
            react_clip_set(set, t).features(),
        ),
        None => forward_batch(pipeline.layer, pipeline.mask, set.features()),
    };
    let id_logits = logits_of(id)?;
    let ood_logits = logits_of(ood)?;
    let id_scores = pipeline.score(id)?;
    let ood_scores = pipeline.score(ood)?;
    distribution_stats_from(
        &id_logits,
        &ood_logits,
        id_scores.values(),
        ood_scores.values(),
    )
}
