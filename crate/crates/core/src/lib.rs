//! Post-hoc out-of-distribution detection by sparsifying the final linear
//! layer of a classifier.
//!
//! The engine works on exported penultimate features and final-layer
//! weights. It ranks every weight by its average contribution on
//! in-distribution data, keeps the top `k`, and scores inputs with the
//! masked layer. Energy, MSP and Mahalanobis scores, activation clipping,
//! ablation sparsifiers, detection metrics, a variance-analysis suite and a
//! small synthetic benchmark are included.

pub mod analysis;
pub mod baselines;
pub mod dice;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod metrics;
pub mod model_io;
pub mod report;
pub mod scoring;
pub mod synth;
pub mod tensor;

pub use baselines::{make_mask, SparsifierKind, SparsifierSpec};
pub use dice::{
    build_mask, compute_contribution, dense_forward, dice_forward, forward_batch, p_to_k,
    ContributionMatrix, Logits, Mask, SparsityParam,
};
pub use error::{DiceError, Result};
pub use metrics::{
    auroc, detect, distribution_stats, fpr_at_tpr, DetectionResult, DistributionStats,
};
pub use model_io::{load_csv_tensor, load_tensor, save_tensor, Bundle, Manifest};
pub use scoring::{
    energy_score, fit_mahalanobis, mahalanobis_score, msp_score, react_clip, react_fit,
    score_pipeline, GaussianClassStats, ReactThreshold, ScoreKind, ScorePipeline, ScoreVector,
};
pub use tensor::{FeatureSet, FinalLayer, Tensor2D};
