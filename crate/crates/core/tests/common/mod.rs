#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use dice_ood::{Bundle, FeatureSet, FinalLayer, Tensor2D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn dice(args: &[&str], threads: Option<usize>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dice"));
    cmd.args(args);
    match threads {
        Some(n) => cmd.env("DICE_THREADS", n.to_string()),
        None => cmd.env_remove("DICE_THREADS"),
    };
    cmd.output().expect("spawn dice")
}

pub fn dice_ok(args: &[&str]) -> String {
    let out = dice(args, None);
    assert!(
        out.status.success(),
        "dice {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f32, hi: f32) -> Tensor2D {
    Tensor2D::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

/// Small random bundle with labeled train/ID sets and `n_ood` OOD sets.
pub fn random_bundle(rng: &mut ChaCha8Rng, m: usize, c: usize, n: usize, n_ood: usize) -> Bundle {
    let layer = FinalLayer::new(
        random_tensor(rng, m, c, -1.0, 1.0),
        (0..c).map(|_| rng.random_range(-0.5..0.5)).collect(),
    )
    .unwrap();
    let labels = |n: usize| Some((0..n).map(|i| i % c).collect());
    let train = FeatureSet::new(
        random_tensor(rng, n.max(2 * c), m, 0.0, 2.0),
        labels(n.max(2 * c)),
    )
    .unwrap();
    let id_test = FeatureSet::new(random_tensor(rng, n, m, 0.0, 2.0), labels(n)).unwrap();
    let mut ood = BTreeMap::new();
    for j in 0..n_ood {
        let n_o = rng.random_range(1..=n);
        ood.insert(
            format!("set{j}"),
            FeatureSet::unlabeled(random_tensor(rng, n_o, m, 0.0, 3.0)).unwrap(),
        );
    }
    Bundle {
        layer,
        train,
        id_test,
        ood,
        noise: None,
    }
}

/// Selects the `k` largest values by repeated linear scans, taking the
/// smallest index among equal values. No sorting involved.
pub fn brute_top_k(values: &[f32], k: usize) -> Vec<bool> {
    let mut taken = vec![false; values.len()];
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (i, &v) in values.iter().enumerate() {
            if taken[i] {
                continue;
            }
            match best {
                Some(b) if values[b] >= v => {}
                _ => best = Some(i),
            }
        }
        taken[best.unwrap()] = true;
    }
    taken
}

pub fn pair_count_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut twice = 0u64;
    for &a in id {
        for &b in ood {
            twice += if a > b {
                2
            } else if a == b {
                1
            } else {
                0
            };
        }
    }
    twice as f64 / (2 * id.len() * ood.len()) as f64
}

/// Tries every observed ID score as a threshold; keeps the largest one that
/// accepts at least `t` of the ID scores.
pub fn sweep_fpr(id: &[f64], ood: &[f64], t: f64) -> (f64, f64) {
    let mut lambda = f64::NEG_INFINITY;
    for &cand in id {
        let accepted = id.iter().filter(|&&s| s >= cand).count() as f64;
        if accepted >= t * id.len() as f64 && cand > lambda {
            lambda = cand;
        }
    }
    let fp = ood.iter().filter(|&&s| s >= lambda).count() as f64;
    (fp / ood.len() as f64, lambda)
}

/// Naive DICE + energy: mean-feature contributions, brute-force top-k,
/// triple-loop masked logits, direct log-sum-exp.
pub struct NaiveDice {
    pub keep: Vec<bool>,
    pub m: usize,
    pub c: usize,
}

impl NaiveDice {
    pub fn fit(layer: &FinalLayer, train: &FeatureSet, p: f64) -> Self {
        let (m, c) = (layer.units(), layer.classes());
        let mut v = vec![0f32; m * c];
        for i in 0..m {
            let mut mean = 0.0f64;
            for r in 0..train.len() {
                mean += train.sample(r)[i] as f64;
            }
            mean /= train.len() as f64;
            for j in 0..c {
                v[i * c + j] = (layer.weight().get(i, j) as f64 * mean) as f32;
            }
        }
        let k = ((1.0 - p) * (m * c) as f64 + 0.5).floor() as usize;
        Self {
            keep: brute_top_k(&v, k.min(m * c)),
            m,
            c,
        }
    }

    pub fn logits(&self, layer: &FinalLayer, h: &[f32]) -> Vec<f64> {
        (0..self.c)
            .map(|j| {
                let mut s = 0.0f64;
                for i in 0..self.m {
                    if self.keep[i * self.c + j] {
                        s += layer.weight().get(i, j) as f64 * h[i] as f64;
                    }
                }
                s + layer.bias()[j] as f64
            })
            .collect()
    }

    pub fn energy(&self, layer: &FinalLayer, h: &[f32]) -> f64 {
        let z = self.logits(layer, h);
        let max = z.iter().cloned().fold(f64::MIN, f64::max);
        max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
    }

    pub fn scores(&self, layer: &FinalLayer, set: &FeatureSet) -> Vec<f64> {
        (0..set.len())
            .map(|r| self.energy(layer, set.sample(r)))
            .collect()
    }

    pub fn mean_max_logit(&self, layer: &FinalLayer, set: &FeatureSet) -> f64 {
        let total: f64 = (0..set.len())
            .map(|r| {
                self.logits(layer, set.sample(r))
                    .into_iter()
                    .fold(f64::MIN, f64::max)
            })
            .sum();
        total / set.len() as f64
    }
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}
