//! One line per acceptance criterion, printed straight to stderr so it shows
//! up in `cargo test` output without `--nocapture`.

mod common;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use common::{brute_top_k, dice, pair_count_auroc, random_bundle, rng, sweep_fpr};
use dice_ood::analysis::{
    pruning_reduction_check, unit_contributions, variance, variance_decomposition,
    ReductionExperiment,
};
use dice_ood::experiment::{Experiment, ExperimentOptions};
use dice_ood::report::{evaluate, sweep, EvalOptions, SweepOptions, Validation};
use dice_ood::synth::{build_reference, BenchConfig, DEFAULT_P_GRID, OOD_SET_NAME};
use dice_ood::{
    auroc, build_mask, energy_score, forward_batch, fpr_at_tpr, msp_score, Bundle,
    ContributionMatrix, FeatureSet, ScoreKind, SparsifierKind, Tensor2D,
};
use rand::seq::SliceRandom;
use rand::Rng;
use tempfile::tempdir;

struct Line {
    id: &'static str,
    pass: bool,
    enforced: bool,
}

fn emit(lines: &mut Vec<Line>, id: &'static str, pass: bool, enforced: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr().lock(),
        "[acceptance {id}] {verdict}: {detail}"
    );
    lines.push(Line { id, pass, enforced });
}

fn criterion_1(lines: &mut Vec<Line>) {
    let start = Instant::now();
    let mut r = rng(1);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let m = r.random_range(1..=24);
        let c = r.random_range(2..=8);
        let n = r.random_range(2..=12);
        let n_ood = r.random_range(1..=2);
        let bundle = random_bundle(&mut r, m, c, n, n_ood);
        let exp = Experiment::new(&bundle, ExperimentOptions::new(ScoreKind::Energy)).unwrap();
        let mask = exp.mask(SparsifierKind::DiceTopK, 0.0, 0).unwrap();
        let x = bundle.id_test.features();
        let dense = forward_batch(&bundle.layer, None, x).unwrap();
        let masked = forward_batch(&bundle.layer, Some(&mask), x).unwrap();
        let bits = |d: &[f64]| d.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        let logits_equal = bits(dense.data()) == bits(masked.data());

        let score = if r.random_bool(0.5) {
            ScoreKind::Energy
        } else {
            ScoreKind::Msp
        };
        let none = evaluate(&bundle, &EvalOptions::new(SparsifierKind::None, score, 0.0)).unwrap();
        let zero = evaluate(
            &bundle,
            &EvalOptions::new(SparsifierKind::DiceTopK, score, 0.0),
        )
        .unwrap();
        let reports_equal = none.sets == zero.sets
            && none.average == zero.average
            && none.id_accuracy == zero.id_accuracy
            && none.mask_popcount == zero.mask_popcount;
        if !(logits_equal && reports_equal) {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    emit(
        lines,
        "1 p=0 equivalence",
        mismatches == 0 && secs < 10.0,
        true,
        format!("1000 instances, {mismatches} mismatches, {secs:.2}s (limit 10s)"),
    );
}

fn criterion_2(lines: &mut Vec<Line>) {
    let mut r = rng(2);
    let mut mismatches = 0;
    let mut duplicated_cases = 0;
    for case in 0..500 {
        let m: usize = r.random_range(1..=64);
        let c: usize = r.random_range(1..=16);
        let total = m * c;
        let mut v: Vec<f32> = (0..total).map(|_| r.random_range(-5.0f32..5.0)).collect();
        // most cases draw from a handful of levels so ties are everywhere
        if case % 5 != 0 && total > 1 {
            let levels: Vec<f32> = (0..r.random_range(1..=4)).map(|i| i as f32 - 1.5).collect();
            let n_dup = (total * 3).div_ceil(10).max(2).min(total);
            let mut idx: Vec<usize> = (0..total).collect();
            idx.shuffle(&mut r);
            for &i in &idx[..n_dup] {
                v[i] = levels[r.random_range(0..levels.len())];
            }
            duplicated_cases += 1;
        }
        let k = r.random_range(0..=total);
        let cm = ContributionMatrix::from_tensor(Tensor2D::new(m, c, v.clone()).unwrap());
        let mask = build_mask(&cm, k).unwrap();
        let got: Vec<bool> = mask.tensor().data().iter().map(|&x| x == 1.0).collect();
        if got != brute_top_k(&v, k) {
            mismatches += 1;
        }
    }
    emit(
        lines,
        "2 mask oracle",
        mismatches == 0,
        true,
        format!("500 matrices up to 64×16 ({duplicated_cases} with ≥30% duplicates), {mismatches} mismatches"),
    );
}

fn criterion_3(lines: &mut Vec<Line>) {
    let mut r = rng(3);
    let mut mismatches = 0;
    for _ in 0..300 {
        let n_id = r.random_range(1..=200);
        let n_ood = r.random_range(1..=200);
        // coarse grid so ID/OOD and within-set ties are common
        let levels = r.random_range(2..=30) as f64;
        let mut draw = |n: usize, shift: f64| -> Vec<f64> {
            (0..n)
                .map(|_| (r.random_range(0.0..levels) + shift).floor() / 4.0)
                .collect()
        };
        let id = draw(n_id, 2.0);
        let ood = draw(n_ood, 0.0);
        let (fpr, lambda) = fpr_at_tpr(&id, &ood, 0.95).unwrap();
        let (fpr_o, lambda_o) = sweep_fpr(&id, &ood, 0.95);
        let a = auroc(&id, &ood).unwrap();
        if a != pair_count_auroc(&id, &ood) || fpr != fpr_o || lambda != lambda_o {
            mismatches += 1;
        }
    }
    emit(
        lines,
        "3 metric oracles",
        mismatches == 0,
        true,
        format!("300 score-set pairs with ties, {mismatches} mismatches"),
    );
}

fn criterion_4(lines: &mut Vec<Line>) {
    let mut r = rng(4);
    let (mut non_finite, mut energy_worst, mut msp_worst) = (0, 0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let c = r.random_range(2..=32);
        let scale = 10f64.powf(r.random_range(0.0..=4.0));
        let z: Vec<f64> = (0..c).map(|_| r.random_range(-scale..=scale)).collect();
        let shift = r.random_range(-1e4..=1e4);
        let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
        let (e, es) = (energy_score(&z).unwrap(), energy_score(&shifted).unwrap());
        let (s, ss) = (msp_score(&z).unwrap(), msp_score(&shifted).unwrap());
        if ![e, es, s, ss].iter().all(|v| v.is_finite()) {
            non_finite += 1;
        }
        let rel = ((es - e) - shift).abs() / es.abs().max(e.abs()).max(1.0);
        energy_worst = energy_worst.max(rel);
        msp_worst = msp_worst.max((ss - s).abs());
    }
    emit(
        lines,
        "4 scoring stability",
        non_finite == 0 && energy_worst <= 1e-6 && msp_worst <= 1e-9,
        true,
        format!(
            "10000 cases up to |z|=1e4: {non_finite} non-finite, energy shift err {energy_worst:.1e} (≤1e-6), \
             msp shift err {msp_worst:.1e} (≤1e-9)"
        ),
    );
}

/// Logit variance over a set, straight from the dense forward pass. The bias
/// is constant across samples so it drops out.
fn logit_variance(bundle: &Bundle, set: &FeatureSet, class: usize) -> f64 {
    let logits = forward_batch(&bundle.layer, None, set.features()).unwrap();
    let col: Vec<f64> = (0..logits.len()).map(|i| logits.row(i)[class]).collect();
    variance(&col)
}

/// Worst relative residual of `Var[f_c] = Σσᵢ² + 2ΣCov` over every class and
/// set of `bundle`. The left side is the variance of the forward-pass logits;
/// the right side is rebuilt here from per-unit contributions with plain
/// two-pass sums. The library's own decomposition is held to the same bound.
fn identity_worst(bundle: &Bundle) -> f64 {
    let exp = Experiment::new(bundle, ExperimentOptions::new(ScoreKind::Energy)).unwrap();
    let mask = exp.mask(SparsifierKind::DiceTopK, 0.7, 0).unwrap();
    let layer = &bundle.layer;
    let m = layer.units();
    let mut sets: Vec<&FeatureSet> = vec![&bundle.id_test];
    sets.extend(bundle.ood.values());
    let mut worst = 0.0f64;
    for set in sets.into_iter().filter(|s| s.len() >= 2) {
        let n = set.len() as f64;
        for class in 0..layer.classes() {
            let u: Vec<Vec<f64>> = (0..set.len())
                .map(|r| {
                    (0..m)
                        .map(|i| layer.weight().get(i, class) as f64 * set.sample(r)[i] as f64)
                        .collect()
                })
                .collect();
            let mu: Vec<f64> = (0..m)
                .map(|i| u.iter().map(|row| row[i]).sum::<f64>() / n)
                .collect();
            let cov = |i: usize, j: usize| {
                u.iter()
                    .map(|row| (row[i] - mu[i]) * (row[j] - mu[j]))
                    .sum::<f64>()
                    / n
            };
            let sigma: f64 = (0..m).map(|i| cov(i, i)).sum();
            let cross: f64 = (0..m)
                .flat_map(|i| (i + 1..m).map(move |j| (i, j)))
                .map(|(i, j)| cov(i, j))
                .sum();
            let rhs = sigma + 2.0 * cross;
            let lhs = logit_variance(bundle, set, class);
            let scale = lhs.abs().max(1.0);
            worst = worst.max((lhs - rhs).abs() / scale);

            let contribs = unit_contributions(layer, set, class).unwrap();
            let rep = variance_decomposition(&contribs, &mask.kept_units(class)).unwrap();
            worst = worst
                .max(rep.identity_residual / scale)
                .max(rep.reduction_residual / scale)
                .max((rep.var_full - lhs).abs() / scale);
        }
    }
    worst
}

fn criterion_5(lines: &mut Vec<Line>, reference: &Bundle) {
    let mut worst = identity_worst(reference);
    let mut r = rng(5);
    for _ in 0..50 {
        let m = r.random_range(2..=32);
        let c = r.random_range(2..=10);
        let n = r.random_range(3..=60);
        worst = worst.max(identity_worst(&random_bundle(&mut r, m, c, n, 2)));
    }
    emit(
        lines,
        "5 variance identity",
        worst <= 1e-6,
        true,
        format!("reference + 50 random bundles, worst relative residual {worst:.1e} (≤1e-6)"),
    );
}

fn criterion_6(lines: &mut Vec<Line>) {
    let start = Instant::now();
    let exp = ReductionExperiment {
        sigmas: vec![0.5, 1.0, 1.5, 2.0, 0.3, 0.8, 1.2, 0.6, 1.7, 0.9],
        pruned: 4,
        seed: 2022,
        samples: 100_000,
    };
    let check = pruning_reduction_check(&exp).unwrap();
    let secs = start.elapsed().as_secs_f64();
    emit(
        lines,
        "6 pruning variance reduction",
        check.pass && secs < 30.0,
        true,
        format!(
            "m=10, 4 pruned, N=1e5: empirical {:.4}, predicted {:.4}, |diff| {:.4} ≤ tol {:.4} (3 batched SE), {secs:.2}s (limit 30s)",
            check.empirical,
            check.predicted,
            (check.empirical - check.predicted).abs(),
            check.tolerance
        ),
    );
}

fn criterion_7(lines: &mut Vec<Line>) -> Bundle {
    let start = Instant::now();
    let out = build_reference(&BenchConfig::default()).unwrap();
    let bundle = out.bundle;
    let exp = Experiment::new(&bundle, ExperimentOptions::new(ScoreKind::Energy)).unwrap();
    let ood = &bundle.ood[OOD_SET_NAME];
    let std_at = |p: f64| {
        let mask = exp.mask(SparsifierKind::DiceTopK, p, 0).unwrap();
        let id = exp.scores(&mask, &bundle.id_test).unwrap();
        exp.evaluate_set(&mask, &id, ood).unwrap()
    };
    let dense = std_at(0.0);
    let pruned = std_at(0.7);
    let (s0, s7) = (
        dense.stats.ood_score_std_normalized,
        pruned.stats.ood_score_std_normalized,
    );

    let opts = SweepOptions {
        methods: vec![SparsifierKind::DiceTopK],
        p_grid: DEFAULT_P_GRID.to_vec(),
        seed: 0,
        validate: Some(Validation::Noise),
        experiment: ExperimentOptions::new(ScoreKind::Energy),
    };
    let body = sweep(&bundle, &opts).unwrap();
    let best_p = body.selection["dice"].best_p;
    let selected = std_at(best_p);
    let secs = start.elapsed().as_secs_f64();
    let (fpr_sel, fpr_dense) = (selected.detection.fpr95, dense.detection.fpr95);

    emit(
        lines,
        "7a std shrinks at p=0.7",
        s7 < s0 && secs < 60.0,
        true,
        format!("normalized OOD score std {s0:.4} at p=0 → {s7:.4} at p=0.7, {secs:.2}s incl. training (limit 60s)"),
    );
    emit(
        lines,
        "7b selected-p FPR95 ≤ dense",
        fpr_sel <= fpr_dense,
        false,
        format!(
            "noise-validated p={best_p}: FPR95 {fpr_sel:.4} vs dense {fpr_dense:.4} \
             (reported, not enforced; see README)"
        ),
    );
    bundle
}

/// Dense argmax accuracy with an f64 triple loop; ties go to the lower class.
fn oracle_accuracy(bundle: &Bundle) -> f64 {
    let set = &bundle.id_test;
    let labels = set.labels().unwrap();
    let layer = &bundle.layer;
    let mut correct = 0;
    for (r, &label) in labels.iter().enumerate() {
        let h = set.sample(r);
        let mut best = (0, f64::NEG_INFINITY);
        for j in 0..layer.classes() {
            let mut z = layer.bias()[j] as f64;
            for (i, &hi) in h.iter().enumerate() {
                z += layer.weight().get(i, j) as f64 * hi as f64;
            }
            if z > best.1 {
                best = (j, z);
            }
        }
        correct += usize::from(best.0 == label);
    }
    correct as f64 / labels.len() as f64
}

fn criterion_8(lines: &mut Vec<Line>, reference: &Bundle) {
    let mut r = rng(8);
    let mut bundles = vec![reference.clone()];
    for _ in 0..10 {
        let m = r.random_range(2..=20);
        let c = r.random_range(2..=6);
        let n = r.random_range(4..=40);
        bundles.push(random_bundle(&mut r, m, c, n, 1));
    }
    let mut grid = vec![0.0];
    grid.extend_from_slice(&DEFAULT_P_GRID);
    let (mut cells, mut mismatches) = (0, 0);
    for bundle in &bundles {
        let expected = oracle_accuracy(bundle);
        for kind in SparsifierKind::ALL {
            for &p in &grid {
                let body = evaluate(bundle, &EvalOptions::new(kind, ScoreKind::Energy, p)).unwrap();
                cells += 1;
                if body.id_accuracy != Some(expected) {
                    mismatches += 1;
                }
            }
        }
    }
    emit(
        lines,
        "8 classification preserved",
        mismatches == 0,
        true,
        format!(
            "{cells} (bundle, method, p) cells, {mismatches} differ from the dense argmax oracle"
        ),
    );
}

fn run_ok(args: &[&str], threads: usize) {
    let out = dice(args, Some(threads));
    assert!(
        out.status.success(),
        "dice {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn hash_of(path: &Path) -> String {
    common::read_json(path)["determinism_hash"]
        .as_str()
        .unwrap()
        .to_string()
}

fn bundle_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().into_string().unwrap(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn all_equal(v: &[String]) -> bool {
    v.windows(2).all(|w| w[0] == w[1])
}

fn criterion_9(lines: &mut Vec<Line>) {
    let tmp = tempdir().unwrap();
    let runs = [("a", 1), ("b", 1), ("c", 8), ("d", 8)];
    let mut bundles = Vec::new();
    let mut eval_hashes = Vec::new();
    let mut sweep_hashes = Vec::new();
    for (tag, threads) in runs {
        let dir = tmp.path().join(tag);
        let bundle = dir.join("bundle");
        let b = bundle.to_str().unwrap();
        run_ok(&["synth", "--seed", "2022", "--out", b], threads);
        let eval = dir.join("eval.json");
        run_ok(
            &[
                "eval",
                b,
                "--method",
                "dice",
                "--p",
                "0.7",
                "--react",
                "90",
                "--out",
                eval.to_str().unwrap(),
            ],
            threads,
        );
        let sw = dir.join("sweep");
        run_ok(
            &[
                "sweep",
                b,
                "--methods",
                "dice,randomk,wdrop",
                "--validate",
                "noise",
                "--out",
                sw.to_str().unwrap(),
            ],
            threads,
        );
        bundles.push(bundle_files(&bundle));
        eval_hashes.push(hash_of(&eval));
        sweep_hashes.push(hash_of(&sw.join("sweep.json")));
    }
    let bundles_same = bundles.windows(2).all(|w| w[0] == w[1]);
    let pass = bundles_same && all_equal(&eval_hashes) && all_equal(&sweep_hashes);
    emit(
        lines,
        "9 determinism",
        pass,
        true,
        format!(
            "synth/eval/sweep ×2 at 1 and 8 threads: bundles identical={}, eval hash {}, sweep hash {}",
            bundles_same,
            &eval_hashes[0][..12],
            &sweep_hashes[0][..12]
        ),
    );
}

#[test]
fn acceptance() {
    let mut lines = Vec::new();
    criterion_1(&mut lines);
    criterion_2(&mut lines);
    criterion_3(&mut lines);
    criterion_4(&mut lines);
    let reference = criterion_7(&mut lines);
    criterion_5(&mut lines, &reference);
    criterion_6(&mut lines);
    criterion_8(&mut lines, &reference);
    criterion_9(&mut lines);

    let failed: Vec<&str> = lines
        .iter()
        .filter(|l| l.enforced && !l.pass)
        .map(|l| l.id)
        .collect();
    assert!(failed.is_empty(), "acceptance failures: {failed:?}");
}
