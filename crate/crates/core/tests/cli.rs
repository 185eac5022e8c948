mod common;

use std::fs;
use std::path::Path;

use common::{close, dice, dice_ok, read_json, NaiveDice};
use dice_ood::{Bundle, FeatureSet, FinalLayer, Tensor2D};
use tempfile::tempdir;

fn synth(dir: &Path, extra: &[&str]) {
    let out = dir.to_str().unwrap();
    let mut args = vec!["synth", "--out", out];
    args.extend_from_slice(extra);
    dice_ok(&args);
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().into_string().unwrap(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn synth_writes_deterministic_bundle() {
    let a = tempdir().unwrap();
    let b = tempdir().unwrap();
    synth(a.path(), &[]);
    synth(b.path(), &[]);
    for member in [
        "W",
        "b",
        "features_train",
        "features_id_test",
        "features_ood_cloud",
    ] {
        assert!(a.path().join(format!("{member}.json")).exists(), "{member}");
    }
    assert!(a.path().join("config.json").exists());
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));

    let c = tempdir().unwrap();
    synth(c.path(), &["--seed", "9"]);
    assert_ne!(dir_bytes(a.path()), dir_bytes(c.path()));
}

#[test]
fn synth_rejects_bad_config() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"p_grid": [0.5, 1.5]}"#).unwrap();
    let out = dice(
        &[
            "synth",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().join("b").to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("p grid"));

    fs::write(&cfg, r#"{"ood_mean": [4.0, 0.0]}"#).unwrap();
    let out = dice(
        &[
            "synth",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().join("b").to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let dir = tempdir().unwrap();
    let bundle = dir.path().join("ref");
    synth(&bundle, &[]);
    let b = bundle.to_str().unwrap();
    assert_eq!(
        dice(&["eval", b, "--p", "1.5"], None).status.code(),
        Some(2)
    );
    assert_eq!(
        dice(&["eval", b, "--method", "nope"], None).status.code(),
        Some(2)
    );
    assert_eq!(
        dice(&["eval", b, "--react", "abc"], None).status.code(),
        Some(2)
    );
    assert_eq!(
        dice(&["eval", "/definitely/not/here"], None).status.code(),
        Some(3)
    );
    assert_eq!(dice(&["eval", b], Some(0)).status.code(), Some(2));

    // a dead unit makes the unshrunk covariance singular
    let broken = dir.path().join("singular");
    let mut r = common::rng(1);
    let mut bundle = common::random_bundle(&mut r, 4, 2, 12, 1);
    let zero_col = |t: &Tensor2D| {
        Tensor2D::from_fn(
            t.rows(),
            t.cols(),
            |i, j| if j == 3 { 0.0 } else { t.get(i, j) },
        )
    };
    bundle.train = FeatureSet::new(
        zero_col(bundle.train.features()),
        bundle.train.labels().map(<[_]>::to_vec),
    )
    .unwrap();
    bundle.save(&broken).unwrap();
    let out = dice(
        &[
            "eval",
            broken.to_str().unwrap(),
            "--score",
            "mahalanobis",
            "--shrinkage",
            "0",
        ],
        None,
    );
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    dice_ok(&["eval", broken.to_str().unwrap(), "--score", "mahalanobis"]);
}

#[test]
fn eval_p_zero_matches_dense() {
    let dir = tempdir().unwrap();
    let bundle = dir.path().join("ref");
    synth(&bundle, &[]);
    let b = bundle.to_str().unwrap();
    let none = dir.path().join("none.json");
    let zero = dir.path().join("zero.json");
    dice_ok(&[
        "eval",
        b,
        "--method",
        "none",
        "--out",
        none.to_str().unwrap(),
    ]);
    dice_ok(&[
        "eval",
        b,
        "--method",
        "dice",
        "--p",
        "0",
        "--out",
        zero.to_str().unwrap(),
    ]);
    let (none, zero) = (read_json(&none), read_json(&zero));
    assert_eq!(none["sets"], zero["sets"]);
    assert_eq!(none["average"], zero["average"]);
    assert_eq!(none["id_accuracy"], zero["id_accuracy"]);
    assert_eq!(none["format_version"], "1");
}

#[test]
fn eval_matches_naive_pipeline() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("ref");
    synth(&path, &[]);
    let report = dir.path().join("r.json");
    dice_ok(&[
        "eval",
        path.to_str().unwrap(),
        "--method",
        "dice",
        "--p",
        "0.7",
        "--score",
        "energy",
        "--out",
        report.to_str().unwrap(),
    ]);
    let report = read_json(&report);
    let bundle = Bundle::load(&path).unwrap();
    let naive = NaiveDice::fit(&bundle.layer, &bundle.train, 0.7);
    let id = naive.scores(&bundle.layer, &bundle.id_test);
    let ood_set = &bundle.ood["cloud"];
    let ood = naive.scores(&bundle.layer, ood_set);

    let got = &report["sets"]["cloud"];
    let f = |v: &serde_json::Value| v.as_f64().unwrap();
    let (fpr, lambda) = common::sweep_fpr(&id, &ood, 0.95);
    assert!(close(f(&got["detection"]["fpr95"]), fpr, 1e-6));
    assert!(close(
        f(&got["detection"]["threshold_lambda"]),
        lambda,
        1e-6
    ));
    assert!(close(
        f(&got["detection"]["auroc"]),
        common::pair_count_auroc(&id, &ood),
        1e-6
    ));

    let mi = naive.mean_max_logit(&bundle.layer, &bundle.id_test);
    let mo = naive.mean_max_logit(&bundle.layer, ood_set);
    let mean_id = id.iter().sum::<f64>() / id.len() as f64;
    let mean_ood = ood.iter().sum::<f64>() / ood.len() as f64;
    let std_ood =
        (ood.iter().map(|s| (s - mean_ood).powi(2)).sum::<f64>() / ood.len() as f64).sqrt();
    assert!(close(f(&got["stats"]["mean_id_maxlogit"]), mi, 1e-6));
    assert!(close(f(&got["stats"]["mean_ood_maxlogit"]), mo, 1e-6));
    assert!(close(f(&got["stats"]["delta"]), mi - mo, 1e-6));
    assert!(close(
        f(&got["stats"]["ood_score_std_normalized"]),
        std_ood / mean_id,
        1e-6
    ));
    assert_eq!(
        report["mask_popcount"],
        naive.keep.iter().filter(|&&k| k).count()
    );
}

#[test]
fn sweep_outputs() {
    let dir = tempdir().unwrap();
    let bundle = dir.path().join("ref");
    synth(&bundle, &[]);
    let b = bundle.to_str().unwrap();

    let zero = dir.path().join("zero");
    dice_ok(&["sweep", b, "--p-grid", "0", "--out", zero.to_str().unwrap()]);
    let dense = dir.path().join("dense.json");
    dice_ok(&[
        "eval",
        b,
        "--method",
        "none",
        "--out",
        dense.to_str().unwrap(),
    ]);
    let (s, d) = (read_json(&zero.join("sweep.json")), read_json(&dense));
    assert_eq!(
        s["rows"][0]["fpr95"],
        d["sets"]["cloud"]["detection"]["fpr95"]
    );
    assert_eq!(
        s["rows"][0]["auroc"],
        d["sets"]["cloud"]["detection"]["auroc"]
    );

    let runs: Vec<_> = (0..2)
        .map(|i| {
            let out = dir.path().join(format!("full{i}"));
            dice_ok(&[
                "sweep",
                b,
                "--methods",
                "dice,bottomk,randomk,wdrop,uprune",
                "--validate",
                "noise",
                "--out",
                out.to_str().unwrap(),
            ]);
            out
        })
        .collect();
    let csv0 = fs::read(runs[0].join("sweep.csv")).unwrap();
    assert_eq!(csv0, fs::read(runs[1].join("sweep.csv")).unwrap());
    let report = read_json(&runs[0].join("sweep.json"));
    assert_eq!(report["nested_masks"]["dice"], true);
    assert_eq!(report["nested_masks"]["bottomk"], true);
    // pinned on the reference bundle
    assert_eq!(report["selection"]["dice"]["best_p"], 0.1);
    let header = String::from_utf8(csv0).unwrap();
    assert!(header.starts_with("method,p,k,popcount,set,fpr95,auroc\n"));
    // 5 methods × 6 p × (1 set + average)
    assert_eq!(header.lines().count(), 1 + 5 * 6 * 2);
}

#[test]
fn analyze_outputs() {
    let dir = tempdir().unwrap();
    let bundle = dir.path().join("ref");
    synth(&bundle, &[]);
    let out = dir.path().join("an");
    dice_ok(&[
        "analyze",
        bundle.to_str().unwrap(),
        "--class",
        "0",
        "--out",
        out.to_str().unwrap(),
    ]);
    let v = read_json(&out.join("variance.json"));
    for side in ["id", "ood"] {
        assert!(v[side]["identity_residual"].as_f64().unwrap() <= 1e-6);
    }
    let ood = &v["ood"];
    assert!(ood["var_full"].as_f64().unwrap() - ood["var_dice"].as_f64().unwrap() > 0.0);
    assert!(out.join("covariance_ood.json").exists());
    let profile = fs::read_to_string(out.join("profile.csv")).unwrap();
    assert_eq!(profile.lines().count(), 17);

    // constant features → zero variance everywhere
    let flat = dir.path().join("flat");
    let layer = FinalLayer::new(
        Tensor2D::from_fn(3, 2, |i, j| (i + j) as f32 - 1.0),
        vec![0.0, 0.0],
    )
    .unwrap();
    let constant =
        |n: usize| FeatureSet::unlabeled(Tensor2D::from_fn(n, 3, |_, j| j as f32 + 0.5)).unwrap();
    let mut ood = std::collections::BTreeMap::new();
    ood.insert("flat".to_string(), constant(4));
    Bundle {
        layer,
        train: constant(5),
        id_test: constant(6),
        ood,
        noise: None,
    }
    .save(&flat)
    .unwrap();
    let out = dir.path().join("an_flat");
    dice_ok(&[
        "analyze",
        flat.to_str().unwrap(),
        "--class",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    let profile = fs::read_to_string(out.join("profile.csv")).unwrap();
    for line in profile.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!((f[2], f[4]), ("0", "0"), "{line}");
    }
    let v = read_json(&out.join("variance.json"));
    assert_eq!(v["ood"]["var_full"], 0.0);
}
