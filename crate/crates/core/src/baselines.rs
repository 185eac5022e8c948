//! Alternative sparsifiers for ablations: unit-selection variants ranked by
//! contribution, magnitude pruning, and random dropout.
//!
//! Stochastic kinds draw from ChaCha8 seeded with `seed_from_u64(seed)`, and
//! index sampling goes through `u64` ranges, so masks are identical on every
//! platform for a given seed.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dice::{build_mask, rank_flat, ContributionMatrix, Mask, Order, SparsityParam};
use crate::error::{DiceError, Result};
use crate::tensor::FinalLayer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SparsifierKind {
    /// `k` largest contributions.
    #[serde(rename = "dice")]
    DiceTopK,
    /// `k` smallest contributions.
    #[serde(rename = "bottomk")]
    BottomK,
    /// `⌈k/2⌉` largest plus `⌊k/2⌋` smallest contributions.
    #[serde(rename = "topbottomk")]
    TopPlusBottomK,
    /// `k` weights uniformly without replacement.
    #[serde(rename = "randomk")]
    RandomK,
    /// Each weight kept with probability `1 − p`.
    #[serde(rename = "wdrop")]
    WeightDropout,
    /// Each unit (row) kept with probability `1 − p`.
    #[serde(rename = "udrop")]
    UnitDropout,
    /// `k` largest `|W|` entries.
    #[serde(rename = "wprune")]
    WeightPruneL1,
    /// Whole units with the largest `‖W[i,·]‖₂`, never exceeding `k` weights.
    #[serde(rename = "uprune")]
    UnitPruneL2,
    #[serde(rename = "none")]
    None,
}

impl SparsifierKind {
    pub const ALL: [SparsifierKind; 9] = [
        SparsifierKind::DiceTopK,
        SparsifierKind::BottomK,
        SparsifierKind::TopPlusBottomK,
        SparsifierKind::RandomK,
        SparsifierKind::WeightDropout,
        SparsifierKind::UnitDropout,
        SparsifierKind::WeightPruneL1,
        SparsifierKind::UnitPruneL2,
        SparsifierKind::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SparsifierKind::DiceTopK => "dice",
            SparsifierKind::BottomK => "bottomk",
            SparsifierKind::TopPlusBottomK => "topbottomk",
            SparsifierKind::RandomK => "randomk",
            SparsifierKind::WeightDropout => "wdrop",
            SparsifierKind::UnitDropout => "udrop",
            SparsifierKind::WeightPruneL1 => "wprune",
            SparsifierKind::UnitPruneL2 => "uprune",
            SparsifierKind::None => "none",
        }
    }

    pub fn is_stochastic(self) -> bool {
        matches!(
            self,
            SparsifierKind::RandomK | SparsifierKind::WeightDropout | SparsifierKind::UnitDropout
        )
    }

    /// Kinds whose mask always holds exactly `k` ones.
    pub fn is_exact_cardinality(self) -> bool {
        matches!(
            self,
            SparsifierKind::DiceTopK
                | SparsifierKind::BottomK
                | SparsifierKind::TopPlusBottomK
                | SparsifierKind::RandomK
                | SparsifierKind::WeightPruneL1
        )
    }

    /// Whether the mask depends on the contribution matrix.
    pub fn needs_contribution(self) -> bool {
        matches!(
            self,
            SparsifierKind::DiceTopK | SparsifierKind::BottomK | SparsifierKind::TopPlusBottomK
        )
    }
}

impl fmt::Display for SparsifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SparsifierKind {
    type Err = DiceError;

    fn from_str(s: &str) -> Result<Self> {
        SparsifierKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = SparsifierKind::ALL.iter().map(|k| k.name()).collect();
                DiceError::Config(format!(
                    "unknown method {s:?} (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsifierSpec {
    pub kind: SparsifierKind,
    pub p: f64,
    pub seed: u64,
}

impl SparsifierSpec {
    pub fn new(kind: SparsifierKind, p: f64, seed: u64) -> Self {
        Self { kind, p, seed }
    }
}

/// Builds the retained-weight mask for `spec`. `v` must have the shape of
/// the layer's `W`.
pub fn make_mask(
    spec: &SparsifierSpec,
    v: &ContributionMatrix,
    layer: &FinalLayer,
) -> Result<Mask> {
    let p = SparsityParam::new(spec.p)?;
    let (m, c) = (layer.units(), layer.classes());
    if v.units() != m || v.classes() != c {
        return Err(DiceError::Shape(format!(
            "contribution matrix is {}×{} but W is {m}×{c}",
            v.units(),
            v.classes()
        )));
    }
    let total = m * c;
    let k = p.keep_count(m, c);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mask = match spec.kind {
        SparsifierKind::DiceTopK => build_mask(v, k)?,
        SparsifierKind::BottomK => {
            Mask::from_flat_indices(m, c, v.ranking_asc().into_iter().take(k))
        }
        SparsifierKind::TopPlusBottomK => {
            let top = k.div_ceil(2);
            let bottom = k / 2;
            let mut chosen = vec![false; total];
            for &i in v.ranking_desc().iter().take(top) {
                chosen[i] = true;
            }
            // the two rankings share a tie-break, so a tied value can head
            // both lists; skip anything already taken to keep exactly k
            let mut added = 0;
            for i in v.ranking_asc() {
                if added == bottom {
                    break;
                }
                if !chosen[i] {
                    chosen[i] = true;
                    added += 1;
                }
            }
            Mask::from_flat_indices(m, c, (0..total).filter(|&i| chosen[i]))
        }
        SparsifierKind::RandomK => {
            // partial Fisher–Yates over flat indices
            let mut idx: Vec<usize> = (0..total).collect();
            for i in 0..k {
                let j = rng.random_range(i as u64..total as u64) as usize;
                idx.swap(i, j);
            }
            Mask::from_flat_indices(m, c, idx.into_iter().take(k))
        }
        SparsifierKind::WeightDropout => {
            let keep = 1.0 - p.value();
            let kept: Vec<usize> = (0..total).filter(|_| rng.random::<f64>() < keep).collect();
            Mask::from_flat_indices(m, c, kept)
        }
        SparsifierKind::UnitDropout => {
            let keep = 1.0 - p.value();
            let mut mask = Mask::zeros(m, c);
            for unit in 0..m {
                if rng.random::<f64>() < keep {
                    mask.set_row(unit, true);
                }
            }
            mask
        }
        SparsifierKind::WeightPruneL1 => {
            let mags: Vec<f32> = layer.weight().data().iter().map(|w| w.abs()).collect();
            Mask::from_flat_indices(
                m,
                c,
                rank_flat(&mags, Order::Descending).into_iter().take(k),
            )
        }
        SparsifierKind::UnitPruneL2 => {
            let norms: Vec<f32> = (0..m)
                .map(|i| {
                    let s: f64 = layer
                        .weight()
                        .row(i)
                        .iter()
                        .map(|&w| (w as f64) * (w as f64))
                        .sum();
                    s.sqrt() as f32
                })
                .collect();
            let units_kept = k / c;
            let mut mask = Mask::zeros(m, c);
            for unit in rank_flat(&norms, Order::Descending)
                .into_iter()
                .take(units_kept)
            {
                mask.set_row(unit, true);
            }
            mask
        }
        SparsifierKind::None => Mask::ones(m, c),
    };
    Ok(mask)
}
