//! Machine-readable outputs of the `eval`, `sweep` and `analyze` commands.
//!
//! Each report splits into a deterministic body and a `run` section holding
//! the timestamp, bundle path and thread count. The body is hashed
//! (SHA-256 over its compact JSON) into `determinism_hash`, so two runs on
//! the same bundle bytes with the same flags agree on the hash wherever
//! the bundle lives and however many threads were used.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    contribution_profile, covariance_matrix, unit_contributions, variance_decomposition,
    CovarianceMatrix, VarianceReport,
};
use crate::baselines::SparsifierKind;
use crate::dice::{p_to_k, Mask};
use crate::error::{DiceError, Result};
use crate::experiment::{
    sweep_p, ContributionSource, Experiment, ExperimentOptions, SetResult, SweepPoint,
};
use crate::metrics::mean;
use crate::model_io::{save_tensor, Bundle};
use crate::scoring::ScoreKind;
use crate::synth::{build_reference, validate_p_grid, BenchConfig, SynthOutput};
use crate::tensor::{FeatureSet, Tensor2D};

pub const FORMAT_VERSION: &str = "1";

/// Not part of the hashed body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub bundle_path: String,
    pub generated_at_unix: u64,
    pub threads: usize,
}

impl RunInfo {
    pub fn now(bundle_path: &Path) -> Self {
        Self {
            bundle_path: bundle_path.display().to_string(),
            generated_at_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            threads: rayon::current_num_threads(),
        }
    }
}

pub fn hash_body<T: Serialize>(body: &T) -> String {
    let bytes = serde_json::to_vec(body).expect("report bodies serialize");
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 over every member's name, shape and raw f32 bits, in a fixed
/// order. Independent of where the bundle sits on disk.
pub fn bundle_digest(bundle: &Bundle) -> String {
    let mut h = Sha256::new();
    let mut put = |name: &str, t: &Tensor2D| {
        h.update(name.as_bytes());
        h.update((t.rows() as u64).to_le_bytes());
        h.update((t.cols() as u64).to_le_bytes());
        for v in t.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    };
    put("W", bundle.layer.weight());
    put(
        "b",
        &Tensor2D::new(1, bundle.layer.classes(), bundle.layer.bias().to_vec()).expect("bias"),
    );
    let mut put_set = |name: &str, set: &FeatureSet| {
        put(name, set.features());
        if let Some(labels) = set.labels() {
            let t = Tensor2D::from_fn(labels.len(), 1, |r, _| labels[r] as f32);
            put(&format!("{name}:labels"), &t);
        }
    };
    put_set("features_train", &bundle.train);
    put_set("features_id_test", &bundle.id_test);
    for (name, set) in &bundle.ood {
        put_set(&format!("features_ood_{name}"), set);
    }
    if let Some(noise) = &bundle.noise {
        put_set("features_noise", noise);
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub method: SparsifierKind,
    pub p: f64,
    pub seed: u64,
    pub experiment: ExperimentOptions,
}

impl EvalOptions {
    pub fn new(method: SparsifierKind, score: ScoreKind, p: f64) -> Self {
        Self {
            method,
            p,
            seed: 0,
            experiment: ExperimentOptions::new(score),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub method: SparsifierKind,
    pub score: ScoreKind,
    pub p: f64,
    pub k: usize,
    pub seed: u64,
    pub react_percentile: Option<f64>,
    pub react_clip: Option<f32>,
    pub contribution_source: ContributionSource,
    pub shrinkage: f64,
    pub units: usize,
    pub classes: usize,
    pub bundle_digest: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AverageRow {
    pub fpr95: f64,
    pub auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalBody {
    pub format_version: String,
    pub config: EvalConfig,
    /// Top-1 accuracy of the dense layer on labeled ID test features.
    pub id_accuracy: Option<f64>,
    pub mask_popcount: usize,
    pub sets: BTreeMap<String, SetResult>,
    pub average: AverageRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub body: EvalBody,
    pub determinism_hash: String,
    pub run: RunInfo,
}

fn average_of(sets: &BTreeMap<String, SetResult>) -> AverageRow {
    let fprs: Vec<f64> = sets.values().map(|r| r.detection.fpr95).collect();
    let aurocs: Vec<f64> = sets.values().map(|r| r.detection.auroc).collect();
    AverageRow {
        fpr95: mean(&fprs),
        auroc: mean(&aurocs),
    }
}

pub fn evaluate(bundle: &Bundle, opts: &EvalOptions) -> Result<EvalBody> {
    let exp = Experiment::new(bundle, opts.experiment.clone())?;
    let mask = exp.mask(opts.method, opts.p, opts.seed)?;
    let id_scores = exp.scores(&mask, &bundle.id_test)?;
    let mut sets = BTreeMap::new();
    for (name, ood) in &bundle.ood {
        sets.insert(name.clone(), exp.evaluate_set(&mask, &id_scores, ood)?);
    }
    let average = average_of(&sets);
    Ok(EvalBody {
        format_version: FORMAT_VERSION.into(),
        config: EvalConfig {
            method: opts.method,
            score: opts.experiment.score,
            p: opts.p,
            k: p_to_k(opts.p, bundle.layer.units(), bundle.layer.classes())?,
            seed: opts.seed,
            react_percentile: opts.experiment.react_percentile,
            react_clip: exp.react.map(|t| t.clip),
            contribution_source: opts.experiment.contribution_source,
            shrinkage: opts.experiment.shrinkage,
            units: bundle.layer.units(),
            classes: bundle.layer.classes(),
            bundle_digest: bundle_digest(bundle),
        },
        id_accuracy: exp.id_accuracy()?,
        mask_popcount: mask.popcount(),
        sets,
        average,
    })
}

pub fn run_eval(dir: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let bundle = Bundle::load(dir)?;
    let body = evaluate(&bundle, opts)?;
    Ok(EvalReport {
        determinism_hash: hash_body(&body),
        body,
        run: RunInfo::now(dir),
    })
}

impl EvalReport {
    /// Fixed-width summary for the terminal.
    pub fn table(&self) -> String {
        let b = &self.body;
        let mut out = String::new();
        let c = &b.config;
        let _ = writeln!(
            out,
            "method={} score={} p={} k={} kept={} seed={}",
            c.method, c.score, c.p, c.k, b.mask_popcount, c.seed
        );
        if let Some(acc) = b.id_accuracy {
            let _ = writeln!(out, "id accuracy (dense) = {:.4}", acc);
        }
        let _ = writeln!(
            out,
            "{:<20} {:>8} {:>8} {:>12} {:>10} {:>10}",
            "set", "FPR95", "AUROC", "lambda", "delta", "ood_std/n"
        );
        for (name, r) in &b.sets {
            let _ = writeln!(
                out,
                "{:<20} {:>8.4} {:>8.4} {:>12.5} {:>10.4} {:>10.4}",
                truncate(name, 20),
                r.detection.fpr95,
                r.detection.auroc,
                r.detection.threshold_lambda,
                r.stats.delta,
                r.stats.ood_score_std_normalized
            );
        }
        let _ = writeln!(
            out,
            "{:<20} {:>8.4} {:>8.4}",
            "average", b.average.fpr95, b.average.auroc
        );
        out
    }
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

/// Which features play the OOD role when choosing `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Validation {
    Noise,
    Set(String),
}

impl Validation {
    pub fn parse(s: &str) -> Self {
        if s == "noise" {
            Validation::Noise
        } else {
            Validation::Set(s.to_string())
        }
    }

    fn features<'b>(&self, bundle: &'b Bundle) -> Result<&'b FeatureSet> {
        match self {
            Validation::Noise => bundle.noise.as_ref().ok_or_else(|| {
                DiceError::Config("--validate noise needs features_noise in the bundle".into())
            }),
            Validation::Set(name) => bundle.ood.get(name).ok_or_else(|| {
                DiceError::Config(format!("no OOD set named {name:?} in the bundle"))
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub methods: Vec<SparsifierKind>,
    pub p_grid: Vec<f64>,
    pub seed: u64,
    pub validate: Option<Validation>,
    pub experiment: ExperimentOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub methods: Vec<SparsifierKind>,
    pub p_grid: Vec<f64>,
    pub score: ScoreKind,
    pub seed: u64,
    pub react_percentile: Option<f64>,
    pub contribution_source: ContributionSource,
    pub validate: Option<Validation>,
    pub selection_metric: String,
    pub bundle_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: SparsifierKind,
    pub p: f64,
    pub k: usize,
    pub popcount: usize,
    pub set: String,
    pub fpr95: f64,
    pub auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub best_p: f64,
    pub validation: Vec<SweepPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepBody {
    pub format_version: String,
    pub config: SweepConfig,
    pub id_accuracy: Option<f64>,
    pub rows: Vec<SweepRow>,
    /// Per method: whether masks shrink monotonically along the grid
    /// (the mask for a larger `p` is a subset of the mask for a smaller one).
    pub nested_masks: BTreeMap<String, bool>,
    pub selection: BTreeMap<String, Selection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    #[serde(flatten)]
    pub body: SweepBody,
    pub determinism_hash: String,
    pub run: RunInfo,
}

fn masks_nested(masks: &[(f64, Mask)]) -> bool {
    let mut by_p: Vec<&(f64, Mask)> = masks.iter().collect();
    by_p.sort_by(|a, b| a.0.total_cmp(&b.0));
    by_p.windows(2).all(|w| w[1].1.is_subset_of(&w[0].1))
}

pub fn sweep(bundle: &Bundle, opts: &SweepOptions) -> Result<SweepBody> {
    if opts.methods.is_empty() {
        return Err(DiceError::Config("no methods to sweep".into()));
    }
    validate_p_grid(&opts.p_grid)?;
    let exp = Experiment::new(bundle, opts.experiment.clone())?;
    let validation = opts
        .validate
        .as_ref()
        .map(|v| v.features(bundle))
        .transpose()?;
    let (m, c) = (bundle.layer.units(), bundle.layer.classes());

    let mut rows = Vec::new();
    let mut nested_masks = BTreeMap::new();
    let mut selection = BTreeMap::new();
    for &method in &opts.methods {
        let mut masks = Vec::with_capacity(opts.p_grid.len());
        for &p in &opts.p_grid {
            let mask = exp.mask(method, p, opts.seed)?;
            let id_scores = exp.scores(&mask, &bundle.id_test)?;
            let mut per_set = BTreeMap::new();
            for (name, ood) in &bundle.ood {
                per_set.insert(name.clone(), exp.evaluate_set(&mask, &id_scores, ood)?);
            }
            let avg = average_of(&per_set);
            let k = p_to_k(p, m, c)?;
            let row = |set: &str, fpr95: f64, auroc: f64| SweepRow {
                method,
                p,
                k,
                popcount: mask.popcount(),
                set: set.to_string(),
                fpr95,
                auroc,
            };
            for (name, r) in &per_set {
                rows.push(row(name, r.detection.fpr95, r.detection.auroc));
            }
            rows.push(row("average", avg.fpr95, avg.auroc));
            masks.push((p, mask));
        }
        nested_masks.insert(method.name().to_string(), masks_nested(&masks));
        if let Some(v) = validation {
            let s = sweep_p(&exp, method, &opts.p_grid, opts.seed, v)?;
            selection.insert(
                method.name().to_string(),
                Selection {
                    best_p: s.best_p,
                    validation: s.points,
                },
            );
        }
    }
    Ok(SweepBody {
        format_version: FORMAT_VERSION.into(),
        config: SweepConfig {
            methods: opts.methods.clone(),
            p_grid: opts.p_grid.clone(),
            score: opts.experiment.score,
            seed: opts.seed,
            react_percentile: opts.experiment.react_percentile,
            contribution_source: opts.experiment.contribution_source,
            validate: opts.validate.clone(),
            selection_metric: "fpr95 on validation, ties to smaller p".into(),
            bundle_digest: bundle_digest(bundle),
        },
        id_accuracy: exp.id_accuracy()?,
        rows,
        nested_masks,
        selection,
    })
}

pub fn run_sweep(dir: &Path, opts: &SweepOptions) -> Result<SweepReport> {
    let bundle = Bundle::load(dir)?;
    let body = sweep(&bundle, opts)?;
    Ok(SweepReport {
        determinism_hash: hash_body(&body),
        body,
        run: RunInfo::now(dir),
    })
}

impl SweepBody {
    /// One line per (method, p, set); byte-stable for identical inputs.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,p,k,popcount,set,fpr95,auroc\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.method, r.p, r.k, r.popcount, r.set, r.fpr95, r.auroc
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeOptions {
    pub class: usize,
    pub p: f64,
    /// Defaults to the first OOD set in name order.
    pub ood_set: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceSummary {
    pub format_version: String,
    pub class: usize,
    pub p: f64,
    pub kept_units: Vec<usize>,
    pub ood_set: String,
    pub id: VarianceReport,
    pub ood: VarianceReport,
    pub bundle_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeOutput {
    pub profile_csv: String,
    pub covariance_ood: CovarianceMatrix,
    pub covariance_id: CovarianceMatrix,
    pub variance: VarianceSummary,
}

/// Unit profiles (ID and OOD, both in ascending ID-mean order), covariance
/// of the unit contributions, and the variance decomposition for the units
/// the DICE mask keeps for `class`.
pub fn analyze(bundle: &Bundle, opts: &AnalyzeOptions) -> Result<AnalyzeOutput> {
    bundle.check()?;
    let ood_name = match &opts.ood_set {
        Some(n) => n.clone(),
        None => bundle
            .ood
            .keys()
            .next()
            .expect("bundle has an OOD set")
            .clone(),
    };
    let ood = bundle
        .ood
        .get(&ood_name)
        .ok_or_else(|| DiceError::Config(format!("no OOD set named {ood_name:?} in the bundle")))?;
    let layer = &bundle.layer;

    let id_profile = contribution_profile(layer, &bundle.id_test, opts.class)?;
    let ood_profile = contribution_profile(layer, ood, opts.class)?;
    let mut profile_csv = String::from("unit,id_mean,id_var,ood_mean,ood_var\n");
    for &u in &id_profile.order {
        let _ = writeln!(
            profile_csv,
            "{u},{},{},{},{}",
            id_profile.mean[u], id_profile.var[u], ood_profile.mean[u], ood_profile.var[u]
        );
    }

    let exp = Experiment::new(bundle, ExperimentOptions::new(ScoreKind::Energy))?;
    let mask = exp.mask(SparsifierKind::DiceTopK, opts.p, 0)?;
    let kept_units = mask.kept_units(opts.class);

    let id_contribs = unit_contributions(layer, &bundle.id_test, opts.class)?;
    let ood_contribs = unit_contributions(layer, ood, opts.class)?;
    Ok(AnalyzeOutput {
        profile_csv,
        covariance_ood: covariance_matrix(&ood_contribs)?,
        covariance_id: covariance_matrix(&id_contribs)?,
        variance: VarianceSummary {
            format_version: FORMAT_VERSION.into(),
            class: opts.class,
            p: opts.p,
            id: variance_decomposition(&id_contribs, &kept_units)?,
            ood: variance_decomposition(&ood_contribs, &kept_units)?,
            kept_units,
            ood_set: ood_name,
            bundle_digest: bundle_digest(bundle),
        },
    })
}

/// Writes `profile.csv`, `covariance_id`/`covariance_ood` tensors and
/// `variance.json` into `out`.
pub fn run_analyze(dir: &Path, opts: &AnalyzeOptions, out: &Path) -> Result<AnalyzeOutput> {
    let bundle = Bundle::load(dir)?;
    let result = analyze(&bundle, opts)?;
    fs::create_dir_all(out).map_err(|e| DiceError::io(out, e))?;
    write_file(&out.join("profile.csv"), result.profile_csv.as_bytes())?;
    save_tensor(&result.covariance_id.to_tensor(), out, "covariance_id")?;
    save_tensor(&result.covariance_ood.to_tensor(), out, "covariance_ood")?;
    write_json(&out.join("variance.json"), &result.variance)?;
    Ok(result)
}

/// Builds the synthetic reference bundle and writes it, plus `config.json`
/// echoing the config, into `out`.
pub fn run_synth(cfg: &BenchConfig, out: &Path) -> Result<SynthOutput> {
    let result = build_reference(cfg)?;
    result.bundle.save(out)?;
    write_json(&out.join("config.json"), cfg)?;
    Ok(result)
}

pub fn load_bench_config(path: &Path) -> Result<BenchConfig> {
    let text = fs::read_to_string(path).map_err(|e| DiceError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| DiceError::Config(format!("{}: {e}", path.display())))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| DiceError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_file(path, text.as_bytes())
}
