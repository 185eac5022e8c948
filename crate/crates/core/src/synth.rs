//! Desk-scale benchmark: Gaussian blobs in a low-dimensional input space, a
//! small ReLU network trained on them, and the penultimate features it
//! produces for ID, OOD and Gaussian-noise inputs.
//!
//! Every artifact is a pure function of the config. Each random draw comes
//! from its own ChaCha8 stream (`seed`, stream id), so adding samples to one
//! set never shifts another.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dice::{argmax, dense_forward};
use crate::error::{DiceError, Result};
use crate::model_io::Bundle;
use crate::tensor::{FeatureSet, FinalLayer, Tensor2D};

pub const REFERENCE_SEED: u64 = 2022;
pub const DEFAULT_P_GRID: [f64; 6] = [0.1, 0.3, 0.5, 0.7, 0.9, 0.99];
pub const OOD_SET_NAME: &str = "cloud";

const STREAM_TRAIN: u64 = 1;
const STREAM_ID_TEST: u64 = 2;
const STREAM_OOD: u64 = 3;
const STREAM_NOISE: u64 = 4;
const STREAM_INIT: u64 = 5;
const STREAM_SHUFFLE: u64 = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_id_test: usize,
    pub n_ood_test: usize,
    pub n_noise: usize,
    /// One mean per class; all share the input dimension.
    pub class_means: Vec<Vec<f64>>,
    pub class_spread: f64,
    pub ood_mean: Vec<f64>,
    pub ood_spread: f64,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// L2 penalty on weights (not biases).
    pub weight_decay: f64,
    pub p_grid: Vec<f64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let r = 4.0;
        let class_means = (0..3)
            .map(|c| {
                let a = std::f64::consts::TAU * c as f64 / 3.0;
                vec![r * a.cos(), r * a.sin()]
            })
            .collect();
        Self {
            seed: REFERENCE_SEED,
            n_train: 1500,
            n_id_test: 600,
            n_ood_test: 600,
            n_noise: 600,
            class_means,
            class_spread: 0.8,
            ood_mean: vec![0.0, 0.0],
            ood_spread: 2.5,
            hidden: vec![32, 16],
            epochs: 40,
            batch_size: 32,
            learning_rate: 0.02,
            momentum: 0.9,
            weight_decay: 1e-2,
            p_grid: DEFAULT_P_GRID.to_vec(),
        }
    }
}

impl BenchConfig {
    pub fn input_dim(&self) -> usize {
        self.ood_mean.len()
    }

    pub fn classes(&self) -> usize {
        self.class_means.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DiceError::Config(msg));
        let d = self.input_dim();
        if d == 0 {
            return bad("ood_mean must have at least one coordinate".into());
        }
        if self.classes() < 2 {
            return bad(format!(
                "need at least 2 class means, got {}",
                self.classes()
            ));
        }
        for (c, mu) in self.class_means.iter().enumerate() {
            if mu.len() != d {
                return bad(format!(
                    "class mean {c} has dimension {} but ood_mean has {d}",
                    mu.len()
                ));
            }
            if mu.iter().any(|v| !v.is_finite()) {
                return bad(format!("class mean {c} is not finite"));
            }
            if mu == &self.ood_mean {
                return bad(format!("OOD mean coincides with class mean {c}"));
            }
        }
        if self.ood_mean.iter().any(|v| !v.is_finite()) {
            return bad("ood_mean is not finite".into());
        }
        for (name, s) in [
            ("class_spread", self.class_spread),
            ("ood_spread", self.ood_spread),
        ] {
            if !(s.is_finite() && s > 0.0) {
                return bad(format!("{name} must be positive, got {s}"));
            }
        }
        for (name, n) in [
            ("n_train", self.n_train),
            ("n_id_test", self.n_id_test),
            ("n_ood_test", self.n_ood_test),
            ("n_noise", self.n_noise),
        ] {
            if n == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.n_train < 2 * self.classes() {
            return bad(format!(
                "n_train must give every class at least 2 samples, got {}",
                self.n_train
            ));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layer sizes must be non-empty and positive".into());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        validate_p_grid(&self.p_grid)
    }
}

pub fn validate_p_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(DiceError::Config("p grid is empty".into()));
    }
    for (i, &p) in grid.iter().enumerate() {
        if !(0.0..1.0).contains(&p) {
            return Err(DiceError::Config(format!(
                "p grid value {p} outside [0, 1)"
            )));
        }
        if grid[..i].contains(&p) {
            return Err(DiceError::Config(format!("p grid value {p} repeated")));
        }
    }
    Ok(())
}

/// Row-major f64 inputs, optionally labeled.
#[derive(Debug, Clone, PartialEq)]
pub struct Inputs {
    pub dim: usize,
    pub data: Vec<f64>,
    pub labels: Option<Vec<usize>>,
}

impl Inputs {
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Inputs,
    pub id_test: Inputs,
    pub ood_test: Inputs,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn gaussian_point(rng: &mut ChaCha8Rng, mean: &[f64], spread: f64, out: &mut Vec<f64>) {
    for &mu in mean {
        let z: f64 = rng.sample(StandardNormal);
        out.push(mu + spread * z);
    }
}

/// Balanced blobs: sample `i` belongs to class `i mod C`.
fn blobs(cfg: &BenchConfig, n: usize, stream_id: u64) -> Inputs {
    let mut rng = stream(cfg.seed, stream_id);
    let mut data = Vec::with_capacity(n * cfg.input_dim());
    let labels: Vec<usize> = (0..n).map(|i| i % cfg.classes()).collect();
    for &c in &labels {
        gaussian_point(&mut rng, &cfg.class_means[c], cfg.class_spread, &mut data);
    }
    Inputs {
        dim: cfg.input_dim(),
        data,
        labels: Some(labels),
    }
}

fn cloud(cfg: &BenchConfig, n: usize, mean: &[f64], spread: f64, stream_id: u64) -> Inputs {
    let mut rng = stream(cfg.seed, stream_id);
    let mut data = Vec::with_capacity(n * mean.len());
    for _ in 0..n {
        gaussian_point(&mut rng, mean, spread, &mut data);
    }
    Inputs {
        dim: mean.len(),
        data,
        labels: None,
    }
}

pub fn generate_dataset(cfg: &BenchConfig) -> Result<Dataset> {
    cfg.validate()?;
    Ok(Dataset {
        train: blobs(cfg, cfg.n_train, STREAM_TRAIN),
        id_test: blobs(cfg, cfg.n_id_test, STREAM_ID_TEST),
        ood_test: cloud(
            cfg,
            cfg.n_ood_test,
            &cfg.ood_mean,
            cfg.ood_spread,
            STREAM_OOD,
        ),
    })
}

/// Fully connected layer stored input-major: `w[i * out + j]`.
#[derive(Debug, Clone, PartialEq)]
struct Dense {
    inputs: usize,
    outputs: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

impl Dense {
    fn init(inputs: usize, outputs: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let scale = (gain / inputs as f64).sqrt();
        let w = (0..inputs * outputs)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            inputs,
            outputs,
            w,
            b: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.b);
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.w[i * self.outputs..(i + 1) * self.outputs];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += w * xi;
            }
        }
    }
}

/// ReLU network whose last layer is exported as a [`FinalLayer`].
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    hidden: Vec<Dense>,
    head: FinalLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epochs: usize,
}

impl ToyModel {
    pub fn head(&self) -> &FinalLayer {
        &self.head
    }

    pub fn input_dim(&self) -> usize {
        self.hidden[0].inputs
    }

    pub fn feature_dim(&self) -> usize {
        self.head.units()
    }

    /// Post-ReLU penultimate activations, rounded to f32.
    pub fn features(&self, x: &[f64]) -> Result<Vec<f32>> {
        if x.len() != self.input_dim() {
            return Err(DiceError::Shape(format!(
                "input has {} coordinates but the model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut a = x.to_vec();
        let mut next = Vec::new();
        for layer in &self.hidden {
            layer.forward(&a, &mut next);
            next.iter_mut().for_each(|v| *v = v.max(0.0));
            std::mem::swap(&mut a, &mut next);
        }
        Ok(a.into_iter().map(|v| v as f32).collect())
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        dense_forward(&self.head, &self.features(x)?)
    }

    pub fn accuracy(&self, inputs: &Inputs) -> Result<Option<f64>> {
        let Some(labels) = &inputs.labels else {
            return Ok(None);
        };
        let mut correct = 0;
        for (i, &y) in labels.iter().enumerate() {
            if argmax(&self.logits(inputs.row(i))?) == y {
                correct += 1;
            }
        }
        Ok(Some(correct as f64 / labels.len() as f64))
    }
}

struct Trainer {
    layers: Vec<Dense>,
}

impl Trainer {
    /// Forward pass keeping every layer's post-activation output.
    fn forward(&self, x: &[f64], acts: &mut Vec<Vec<f64>>) {
        acts.resize(self.layers.len() + 1, Vec::new());
        acts[0].clear();
        acts[0].extend_from_slice(x);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (prev, rest) = acts.split_at_mut(l + 1);
            layer.forward(&prev[l], &mut rest[0]);
            if l < last {
                rest[0].iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
    }

    fn loss(&self, data: &Inputs) -> f64 {
        let labels = data.labels.as_ref().expect("labeled");
        let mut acts = Vec::new();
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            self.forward(data.row(i), &mut acts);
            total += cross_entropy(acts.last().unwrap(), y).0;
        }
        total / labels.len() as f64
    }
}

/// Loss and its gradient with respect to the logits.
fn cross_entropy(z: &[f64], y: usize) -> (f64, Vec<f64>) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - z[y];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[y] -= 1.0;
    (loss, grad)
}

/// Mini-batch SGD with momentum on the mean cross-entropy. Single-threaded
/// and driven by one shuffle stream, so the final weights are a function of
/// the config alone.
pub fn train_toy(cfg: &BenchConfig, data: &Dataset) -> Result<(ToyModel, TrainingSummary)> {
    cfg.validate()?;
    let labels = data
        .train
        .labels
        .as_ref()
        .ok_or_else(|| DiceError::Data("training inputs need labels".into()))?;
    if data.train.dim != cfg.input_dim() {
        return Err(DiceError::Shape(format!(
            "training inputs have dimension {} but the config has {}",
            data.train.dim,
            cfg.input_dim()
        )));
    }

    let mut init = stream(cfg.seed, STREAM_INIT);
    let mut sizes = vec![cfg.input_dim()];
    sizes.extend(&cfg.hidden);
    sizes.push(cfg.classes());
    let layers: Vec<Dense> = sizes
        .windows(2)
        .enumerate()
        .map(|(l, s)| {
            let gain = if l + 2 == sizes.len() { 1.0 } else { 2.0 };
            Dense::init(s[0], s[1], gain, &mut init)
        })
        .collect();
    let mut net = Trainer { layers };
    let mut velocity: Vec<(Vec<f64>, Vec<f64>)> = net
        .layers
        .iter()
        .map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()]))
        .collect();

    let initial_loss = net.loss(&data.train);
    let mut shuffle = stream(cfg.seed, STREAM_SHUFFLE);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut acts = Vec::new();
    let mut grads: Vec<(Vec<f64>, Vec<f64>)> = velocity.clone();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut running = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            for (gw, gb) in grads.iter_mut() {
                gw.fill(0.0);
                gb.fill(0.0);
            }
            for &i in batch {
                net.forward(data.train.row(i), &mut acts);
                let (loss, mut delta) = cross_entropy(acts.last().unwrap(), labels[i]);
                running += loss;
                for l in (0..net.layers.len()).rev() {
                    let layer = &net.layers[l];
                    let input = &acts[l];
                    let (gw, gb) = &mut grads[l];
                    for (j, d) in delta.iter().enumerate() {
                        gb[j] += d;
                    }
                    for (a, &x) in input.iter().enumerate() {
                        if x != 0.0 {
                            let row = &mut gw[a * layer.outputs..(a + 1) * layer.outputs];
                            for (g, d) in row.iter_mut().zip(&delta) {
                                *g += x * d;
                            }
                        }
                    }
                    if l > 0 {
                        // back through W, then the ReLU of the layer below
                        delta = (0..layer.inputs)
                            .map(|a| {
                                if input[a] <= 0.0 {
                                    return 0.0;
                                }
                                let row = &layer.w[a * layer.outputs..(a + 1) * layer.outputs];
                                row.iter().zip(&delta).map(|(w, d)| w * d).sum()
                            })
                            .collect();
                    }
                }
            }
            let scale = cfg.learning_rate / batch.len() as f64;
            for ((layer, (vw, vb)), (gw, gb)) in
                net.layers.iter_mut().zip(&mut velocity).zip(&grads)
            {
                for ((w, v), g) in layer.w.iter_mut().zip(vw.iter_mut()).zip(gw) {
                    *v = cfg.momentum * *v - scale * g - cfg.learning_rate * cfg.weight_decay * *w;
                    *w += *v;
                }
                for ((b, v), g) in layer.b.iter_mut().zip(vb.iter_mut()).zip(gb) {
                    *v = cfg.momentum * *v - scale * g;
                    *b += *v;
                }
            }
        }
        let finite = net
            .layers
            .iter()
            .all(|l| l.w.iter().chain(&l.b).all(|v| v.is_finite()));
        if !finite || !running.is_finite() {
            return Err(DiceError::Training(format!(
                "weights diverged in epoch {}",
                epoch + 1
            )));
        }
    }
    let final_loss = net.loss(&data.train);
    if !final_loss.is_finite() {
        return Err(DiceError::Training(format!("final loss is {final_loss}")));
    }

    let mut layers = net.layers;
    let last = layers.pop().expect("at least one hidden layer");
    let weight = Tensor2D::new(
        last.inputs,
        last.outputs,
        last.w.iter().map(|&v| v as f32).collect(),
    )?;
    let head = FinalLayer::new(weight, last.b.iter().map(|&v| v as f32).collect())?;
    Ok((
        ToyModel {
            hidden: layers,
            head,
        },
        TrainingSummary {
            initial_loss,
            final_loss,
            epochs: cfg.epochs,
        },
    ))
}

pub fn extract_features(model: &ToyModel, inputs: &Inputs) -> Result<FeatureSet> {
    if inputs.dim != model.input_dim() {
        return Err(DiceError::Shape(format!(
            "inputs have dimension {} but the model expects {}",
            inputs.dim,
            model.input_dim()
        )));
    }
    let m = model.feature_dim();
    let rows: Vec<Vec<f32>> = (0..inputs.len())
        .into_par_iter()
        .map(|i| model.features(inputs.row(i)))
        .collect::<Result<_>>()?;
    let x = Tensor2D::new(inputs.len(), m, rows.concat())?;
    FeatureSet::new(x, inputs.labels.clone())
}

/// Penultimate features of `n_noise` inputs with i.i.d. `N(0, 1)` coordinates.
pub fn noise_validation_features(model: &ToyModel, cfg: &BenchConfig) -> Result<FeatureSet> {
    let zero = vec![0.0; model.input_dim()];
    extract_features(model, &cloud(cfg, cfg.n_noise, &zero, 1.0, STREAM_NOISE))
}

/// Everything `synth` produces.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub bundle: Bundle,
    pub model: ToyModel,
    pub training: TrainingSummary,
    pub id_accuracy: f64,
}

pub fn build_reference(cfg: &BenchConfig) -> Result<SynthOutput> {
    let data = generate_dataset(cfg)?;
    let (model, training) = train_toy(cfg, &data)?;
    let id_test = extract_features(&model, &data.id_test)?;
    let mut ood = BTreeMap::new();
    ood.insert(
        OOD_SET_NAME.to_string(),
        extract_features(&model, &data.ood_test)?,
    );
    let bundle = Bundle {
        layer: model.head().clone(),
        train: extract_features(&model, &data.train)?,
        id_test,
        ood,
        noise: Some(noise_validation_features(&model, cfg)?),
    };
    let id_accuracy = model.accuracy(&data.id_test)?.expect("labeled");
    Ok(SynthOutput {
        bundle,
        model,
        training,
        id_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dice::forward_batch;

    fn small() -> BenchConfig {
        BenchConfig {
            n_train: 300,
            n_id_test: 90,
            n_ood_test: 60,
            n_noise: 40,
            epochs: 15,
            ..BenchConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(BenchConfig::default().validate().is_ok());
        let cases = [
            BenchConfig {
                p_grid: vec![0.1, 0.1],
                ..small()
            },
            BenchConfig {
                p_grid: vec![1.0],
                ..small()
            },
            BenchConfig {
                p_grid: vec![],
                ..small()
            },
            BenchConfig {
                ood_mean: small().class_means[1].clone(),
                ..small()
            },
            BenchConfig {
                class_spread: 0.0,
                ..small()
            },
            BenchConfig {
                n_noise: 0,
                ..small()
            },
            BenchConfig {
                class_means: vec![vec![1.0, 0.0]],
                ..small()
            },
            BenchConfig {
                class_means: vec![vec![1.0], vec![2.0, 0.0]],
                ..small()
            },
        ];
        for cfg in cases {
            assert!(
                matches!(cfg.validate(), Err(DiceError::Config(_))),
                "{cfg:?}"
            );
        }
    }

    #[test]
    fn dataset_is_deterministic_and_balanced() {
        let cfg = small();
        let a = generate_dataset(&cfg).unwrap();
        assert_eq!(a, generate_dataset(&cfg).unwrap());
        let labels = a.train.labels.as_ref().unwrap();
        let counts: Vec<usize> = (0..3)
            .map(|c| labels.iter().filter(|&&y| y == c).count())
            .collect();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        let other = generate_dataset(&BenchConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.train, other.train);
    }

    #[test]
    fn blob_means_recovered() {
        let cfg = BenchConfig {
            n_train: 6000,
            ..BenchConfig::default()
        };
        let data = generate_dataset(&cfg).unwrap();
        let labels = data.train.labels.as_ref().unwrap();
        for (c, mu) in cfg.class_means.iter().enumerate() {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            let se = cfg.class_spread / (idx.len() as f64).sqrt();
            // six coordinates at once: Bonferroni-adjust the two-sided 3 SE
            // level (p = 0.0027) to 3.47 SE each
            for (d, &mu_d) in mu.iter().enumerate() {
                let m = idx.iter().map(|&i| data.train.row(i)[d]).sum::<f64>() / idx.len() as f64;
                assert!(
                    (m - mu_d).abs() <= 3.47 * se,
                    "class {c} dim {d}: {m} vs {mu_d}"
                );
            }
        }
    }

    #[test]
    fn training_reduces_loss_and_is_reproducible() {
        let cfg = small();
        let data = generate_dataset(&cfg).unwrap();
        let (a, sa) = train_toy(&cfg, &data).unwrap();
        let (b, sb) = train_toy(&cfg, &data).unwrap();
        assert!(sa.final_loss < sa.initial_loss);
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = BenchConfig {
            learning_rate: 1e200,
            momentum: 0.99,
            ..small()
        };
        let data = generate_dataset(&cfg).unwrap();
        assert!(matches!(
            train_toy(&cfg, &data),
            Err(DiceError::Training(_))
        ));
    }

    #[test]
    fn features_and_logits_agree_with_engine() {
        let cfg = small();
        let data = generate_dataset(&cfg).unwrap();
        let (model, _) = train_toy(&cfg, &data).unwrap();
        let feats = extract_features(&model, &data.id_test).unwrap();
        assert_eq!(feats.dim(), 16);
        assert!(feats.features().data().iter().all(|&v| v >= 0.0));
        let logits = forward_batch(model.head(), None, feats.features()).unwrap();
        for i in 0..feats.len() {
            let own = model.logits(data.id_test.row(i)).unwrap();
            for (a, b) in own.iter().zip(logits.row(i)) {
                assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
            }
        }
        let noise = noise_validation_features(&model, &cfg).unwrap();
        assert_eq!(noise.features().shape(), [cfg.n_noise, 16]);
        assert_eq!(noise, noise_validation_features(&model, &cfg).unwrap());
        let bad = Inputs {
            dim: 3,
            data: vec![0.0; 3],
            labels: None,
        };
        assert!(matches!(
            extract_features(&model, &bad),
            Err(DiceError::Shape(_))
        ));
    }
}
