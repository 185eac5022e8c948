//! Tensor interchange: one JSON manifest per tensor next to a headerless
//! little-endian row-major `f32` file, plus CSV import for small hand-written
//! cases and the multi-tensor bundle layout.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{DiceError, Result};
use crate::tensor::{FeatureSet, FinalLayer, Tensor2D};

pub const DTYPE: &str = "f32";
pub const BYTE_ORDER: &str = "little";
pub const LAYOUT: &str = "row-major";

const CSV_MAX_CELLS: usize = 1_000_000;

/// Descriptor written next to every raw tensor file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub dtype: String,
    pub shape: [usize; 2],
    pub byte_order: String,
    pub layout: String,
    pub file: String,
}

impl Manifest {
    fn for_tensor(name: &str, t: &Tensor2D) -> Self {
        Self {
            name: name.to_string(),
            dtype: DTYPE.into(),
            shape: t.shape(),
            byte_order: BYTE_ORDER.into(),
            layout: LAYOUT.into(),
            file: format!("{name}.bin"),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dtype != DTYPE {
            return Err(DiceError::Format(format!(
                "unsupported dtype {:?}",
                self.dtype
            )));
        }
        if self.byte_order != BYTE_ORDER {
            return Err(DiceError::Format(format!(
                "unsupported byte order {:?}",
                self.byte_order
            )));
        }
        if self.layout != LAYOUT {
            return Err(DiceError::Format(format!(
                "unsupported layout {:?}",
                self.layout
            )));
        }
        Ok(())
    }
}

pub fn manifest_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.json"))
}

/// Loads the tensor described by the manifest at `manifest_path`.
pub fn load_tensor(manifest_path: &Path) -> Result<Tensor2D> {
    let text = fs::read_to_string(manifest_path).map_err(|e| DiceError::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| {
        DiceError::Format(format!(
            "{}: invalid manifest: {e}",
            manifest_path.display()
        ))
    })?;
    manifest.validate()?;

    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let bin_path = dir.join(&manifest.file);
    let bytes = fs::read(&bin_path).map_err(|e| DiceError::io(&bin_path, e))?;

    let [rows, cols] = manifest.shape;
    if rows == 0 || cols == 0 {
        return Err(DiceError::Format(format!(
            "{}: empty shape [{rows}, {cols}]",
            manifest.name
        )));
    }
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| DiceError::Format(format!("{}: shape overflows", manifest.name)))?;
    if bytes.len() % 4 != 0 || bytes.len() / 4 != count {
        return Err(DiceError::Format(format!(
            "{}: shape [{rows}, {cols}] needs {} bytes, file has {}",
            manifest.name,
            count * 4,
            bytes.len()
        )));
    }

    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let t = Tensor2D::new(rows, cols, data)?;
    if let Some((r, c)) = t.first_non_finite() {
        return Err(DiceError::Data(format!(
            "{}: non-finite value at [{r}, {c}]",
            manifest.name
        )));
    }
    Ok(t)
}

/// Writes `<dir>/<name>.json` and `<dir>/<name>.bin`.
pub fn save_tensor(t: &Tensor2D, dir: &Path, name: &str) -> Result<Manifest> {
    if t.rows() == 0 || t.cols() == 0 {
        return Err(DiceError::Format(format!(
            "{name}: refusing to save empty tensor of shape {:?}",
            t.shape()
        )));
    }
    if let Some((r, c)) = t.first_non_finite() {
        return Err(DiceError::Data(format!(
            "{name}: non-finite value at [{r}, {c}]"
        )));
    }
    let manifest = Manifest::for_tensor(name, t);

    let mut bytes = Vec::with_capacity(t.data().len() * 4);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let bin_path = dir.join(&manifest.file);
    fs::write(&bin_path, &bytes).map_err(|e| DiceError::io(&bin_path, e))?;

    let json_path = manifest_path(dir, name);
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    fs::write(&json_path, json).map_err(|e| DiceError::io(&json_path, e))?;
    Ok(manifest)
}

/// Parses a rectangular numeric CSV (comma separator, `.` decimal point,
/// LF or CRLF line endings). A single trailing newline is allowed.
pub fn parse_csv_tensor(text: &str) -> Result<Tensor2D> {
    let mut lines: Vec<&str> = text
        .split('\n')
        .map(|l| l.strip_suffix('\r').unwrap_or(l))
        .collect();
    if lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    if lines.is_empty() {
        return Err(DiceError::Format("empty CSV".into()));
    }

    let cols = lines[0].split(',').count();
    if lines.len().saturating_mul(cols) > CSV_MAX_CELLS {
        return Err(DiceError::Format(format!(
            "CSV exceeds {CSV_MAX_CELLS} cells; use the binary format"
        )));
    }
    let mut data = Vec::with_capacity(lines.len() * cols);
    for (r, line) in lines.iter().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols {
            return Err(DiceError::Format(format!(
                "line {} has {} fields, expected {cols}",
                r + 1,
                fields.len()
            )));
        }
        for (c, field) in fields.iter().enumerate() {
            let v: f32 = field.trim().parse().map_err(|_| {
                DiceError::Data(format!(
                    "line {}, field {}: cannot parse {field:?}",
                    r + 1,
                    c + 1
                ))
            })?;
            if !v.is_finite() {
                return Err(DiceError::Data(format!(
                    "line {}, field {}: non-finite value",
                    r + 1,
                    c + 1
                )));
            }
            data.push(v);
        }
    }
    Tensor2D::new(lines.len(), cols, data)
}

pub fn load_csv_tensor(path: &Path) -> Result<Tensor2D> {
    let text = fs::read_to_string(path).map_err(|e| DiceError::io(path, e))?;
    parse_csv_tensor(&text)
}

pub(crate) fn labels_to_tensor(labels: &[usize]) -> Tensor2D {
    Tensor2D::new(labels.len(), 1, labels.iter().map(|&l| l as f32).collect())
        .expect("column vector shape")
}

pub(crate) fn tensor_to_labels(t: &Tensor2D, name: &str) -> Result<Vec<usize>> {
    if t.cols() != 1 {
        return Err(DiceError::Format(format!(
            "{name}: labels must be a single column"
        )));
    }
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < 16_777_216.0 {
                Ok(v as usize)
            } else {
                Err(DiceError::Data(format!("{name}: {v} is not a class index")))
            }
        })
        .collect()
}

/// One experiment on disk: final layer, ID train/test features, one or more
/// OOD sets and, optionally, a Gaussian-noise validation set.
///
/// Member names: `W`, `b`, `features_train`, `features_id_test`,
/// `features_ood_<name>`; optional companions `labels_train`,
/// `labels_id_test` (class indices stored as an `n×1` f32 column) and
/// `features_noise`.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub layer: FinalLayer,
    pub train: FeatureSet,
    pub id_test: FeatureSet,
    pub ood: BTreeMap<String, FeatureSet>,
    pub noise: Option<FeatureSet>,
}

const OOD_PREFIX: &str = "features_ood_";

impl Bundle {
    pub fn load(dir: &Path) -> Result<Self> {
        let w = load_tensor(&manifest_path(dir, "W"))?;
        let b = load_tensor(&manifest_path(dir, "b"))?;
        if b.rows() != 1 && b.cols() != 1 {
            return Err(DiceError::Format(format!(
                "b must be a vector, got shape {:?}",
                b.shape()
            )));
        }
        let layer = FinalLayer::new(w, b.into_data())?;

        let train = load_feature_set(dir, "features_train", Some("labels_train"))?;
        let id_test = load_feature_set(dir, "features_id_test", Some("labels_id_test"))?;

        let mut ood = BTreeMap::new();
        let entries = fs::read_dir(dir).map_err(|e| DiceError::io(dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| DiceError::io(dir, e))?;
            let file_name = entry.file_name();
            let Some(file_name) = file_name.to_str() else {
                continue;
            };
            let Some(stem) = file_name.strip_suffix(".json") else {
                continue;
            };
            if let Some(set) = stem.strip_prefix(OOD_PREFIX) {
                if set.is_empty() {
                    continue;
                }
                ood.insert(set.to_string(), load_feature_set(dir, stem, None)?);
            }
        }
        if ood.is_empty() {
            return Err(DiceError::Format(format!(
                "{}: bundle has no {OOD_PREFIX}<name> sets",
                dir.display()
            )));
        }

        let noise = if manifest_path(dir, "features_noise").exists() {
            Some(load_feature_set(dir, "features_noise", None)?)
        } else {
            None
        };

        let bundle = Self {
            layer,
            train,
            id_test,
            ood,
            noise,
        };
        bundle.check()?;
        Ok(bundle)
    }

    pub fn check(&self) -> Result<()> {
        self.train.check_against(&self.layer)?;
        self.id_test.check_against(&self.layer)?;
        for set in self.ood.values() {
            set.check_against(&self.layer)?;
        }
        if let Some(noise) = &self.noise {
            noise.check_against(&self.layer)?;
        }
        Ok(())
    }

    /// Writes every member; returns the manifests in write order.
    pub fn save(&self, dir: &Path) -> Result<Vec<Manifest>> {
        fs::create_dir_all(dir).map_err(|e| DiceError::io(dir, e))?;
        let mut out = vec![
            save_tensor(self.layer.weight(), dir, "W")?,
            save_tensor(
                &Tensor2D::new(1, self.layer.classes(), self.layer.bias().to_vec())?,
                dir,
                "b",
            )?,
        ];
        out.extend(save_feature_set(
            &self.train,
            dir,
            "features_train",
            "labels_train",
        )?);
        out.extend(save_feature_set(
            &self.id_test,
            dir,
            "features_id_test",
            "labels_id_test",
        )?);
        for (name, set) in &self.ood {
            out.push(save_tensor(
                set.features(),
                dir,
                &format!("{OOD_PREFIX}{name}"),
            )?);
        }
        if let Some(noise) = &self.noise {
            out.push(save_tensor(noise.features(), dir, "features_noise")?);
        }
        Ok(out)
    }
}

fn load_feature_set(dir: &Path, name: &str, labels: Option<&str>) -> Result<FeatureSet> {
    let x = load_tensor(&manifest_path(dir, name))?;
    let labels = match labels {
        Some(l) if manifest_path(dir, l).exists() => {
            let t = load_tensor(&manifest_path(dir, l))?;
            Some(tensor_to_labels(&t, l)?)
        }
        _ => None,
    };
    FeatureSet::new(x, labels)
}

fn save_feature_set(
    set: &FeatureSet,
    dir: &Path,
    name: &str,
    labels: &str,
) -> Result<Vec<Manifest>> {
    let mut out = vec![save_tensor(set.features(), dir, name)?];
    if let Some(l) = set.labels() {
        out.push(save_tensor(&labels_to_tensor(l), dir, labels)?);
    }
    Ok(out)
}
