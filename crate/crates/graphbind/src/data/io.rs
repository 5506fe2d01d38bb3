//! Dataset manifests and per-modality tables on disk.
//!
//! Layout (see docs/FORMATS.md): a TOML manifest naming per-modality CSV
//! tables plus an optional labels table. Table rows are `id,v1,...,vD` with
//! no header and no quoting; a row whose feature cells are all empty marks
//! the instance absent in that modality. Floats are written in Rust's
//! shortest round-trip form, so save -> load is bit-exact.

use super::{Dataset, ModalityTable};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    class_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    labels: Option<String>,
    modalities: Vec<ManifestModality>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestModality {
    name: String,
    file: String,
    feature_dim: usize,
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_string(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Write `ds` as `manifest.toml` plus one table per modality into `dir`.
/// Returns the manifest path.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    ds.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;

    for table in &ds.modalities {
        let mut text = String::new();
        for i in 0..ds.n_instances() {
            text.push_str(&ds.instance_ids[i]);
            if table.present[i] {
                for v in table.features.row(i) {
                    let _ = write!(text, ",{v}");
                }
            } else {
                for _ in 0..table.feature_dim {
                    text.push(',');
                }
            }
            text.push('\n');
        }
        write_string(&dir.join(format!("{}.csv", table.name)), &text)?;
    }

    let labels_file = if let Some(labels) = &ds.labels {
        let mut text = String::new();
        for (id, label) in ds.instance_ids.iter().zip(labels) {
            let _ = writeln!(text, "{id},{label}");
        }
        write_string(&dir.join("labels.csv"), &text)?;
        Some("labels.csv".to_string())
    } else {
        None
    };

    let manifest = Manifest {
        class_count: ds.class_count,
        labels: labels_file,
        modalities: ds
            .modalities
            .iter()
            .map(|t| ManifestModality {
                name: t.name.clone(),
                file: format!("{}.csv", t.name),
                feature_dim: t.feature_dim,
            })
            .collect(),
    };
    let manifest_path = dir.join("manifest.toml");
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::Format {
            path: manifest_path.display().to_string(),
            msg: e.to_string(),
        })?;
    write_string(&manifest_path, &text)?;
    Ok(manifest_path)
}

struct ParsedTable {
    ids: Vec<String>,
    features: Matrix,
    present: Vec<bool>,
}

fn parse_table(path: &Path, feature_dim: usize) -> Result<ParsedTable> {
    let text = read_to_string(path)?;
    let display = path.display().to_string();
    let mut ids = Vec::new();
    let mut present = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    for (row_idx, line) in text.lines().enumerate() {
        let row = row_idx + 1;
        let mut cells = line.split(',');
        let id = cells.next().unwrap_or("");
        if id.is_empty() {
            return Err(Error::Parse {
                path: display,
                row,
                col: 1,
                msg: "empty instance id".to_string(),
            });
        }
        let cells: Vec<&str> = cells.collect();
        if cells.len() != feature_dim {
            return Err(Error::Parse {
                path: display,
                row,
                col: cells.len() + 1,
                msg: format!("expected {feature_dim} feature cells, found {}", cells.len()),
            });
        }
        let empty = cells.iter().filter(|c| c.is_empty()).count();
        if empty == feature_dim {
            present.push(false);
            rows.extend(std::iter::repeat_n(0.0, feature_dim));
        } else if empty == 0 {
            present.push(true);
            for (col_idx, cell) in cells.iter().enumerate() {
                let v: f64 = cell.parse().map_err(|_| Error::Parse {
                    path: display.clone(),
                    row,
                    col: col_idx + 2,
                    msg: format!("non-numeric cell '{cell}'"),
                })?;
                rows.push(v);
            }
        } else {
            return Err(Error::Parse {
                path: display,
                row,
                col: 2,
                msg: "row mixes numeric and empty cells; a row must be fully present or fully absent"
                    .to_string(),
            });
        }
        ids.push(id.to_string());
    }
    let features = Matrix::from_vec(ids.len(), feature_dim, rows)?;
    Ok(ParsedTable {
        ids,
        features,
        present,
    })
}

fn parse_labels(path: &Path) -> Result<Vec<(String, usize)>> {
    let text = read_to_string(path)?;
    let display = path.display().to_string();
    let mut out = Vec::new();
    for (row_idx, line) in text.lines().enumerate() {
        let row = row_idx + 1;
        let (id, label) = line.split_once(',').ok_or_else(|| Error::Parse {
            path: display.clone(),
            row,
            col: 1,
            msg: "expected 'id,class'".to_string(),
        })?;
        let class: usize = label.trim().parse().map_err(|_| Error::Parse {
            path: display.clone(),
            row,
            col: 2,
            msg: format!("non-integer class '{label}'"),
        })?;
        out.push((id.to_string(), class));
    }
    Ok(out)
}

/// Render up to eight offending ids for a consistency error.
fn id_sample(ids: &[String]) -> String {
    let shown: Vec<&str> = ids.iter().take(8).map(String::as_str).collect();
    let suffix = if ids.len() > 8 { ", ..." } else { "" };
    format!("[{}{}]", shown.join(", "), suffix)
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = read_to_string(manifest_path)?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Format {
        path: manifest_path.display().to_string(),
        msg: e.to_string(),
    })?;
    if manifest.modalities.is_empty() {
        return Err(Error::Format {
            path: manifest_path.display().to_string(),
            msg: "manifest lists no modalities".to_string(),
        });
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut instance_ids: Option<Vec<String>> = None;
    let mut modalities = Vec::new();
    for entry in &manifest.modalities {
        let table = parse_table(&base.join(&entry.file), entry.feature_dim)?;
        match &instance_ids {
            None => instance_ids = Some(table.ids.clone()),
            Some(expected) => {
                if *expected != table.ids {
                    let missing: Vec<String> = expected
                        .iter()
                        .filter(|id| !table.ids.contains(id))
                        .cloned()
                        .collect();
                    let extra: Vec<String> = table
                        .ids
                        .iter()
                        .filter(|id| !expected.contains(id))
                        .cloned()
                        .collect();
                    let detail = if missing.is_empty() && extra.is_empty() {
                        "same ids, different order".to_string()
                    } else {
                        format!("missing {}, unexpected {}", id_sample(&missing), id_sample(&extra))
                    };
                    return Err(Error::Consistency(format!(
                        "instance ids in '{}' disagree with '{}': {detail}",
                        entry.file, manifest.modalities[0].file
                    )));
                }
            }
        }
        modalities.push(ModalityTable {
            name: entry.name.clone(),
            feature_dim: entry.feature_dim,
            features: table.features,
            present: table.present,
        });
    }
    let instance_ids = instance_ids.expect("at least one modality");

    let labels = match &manifest.labels {
        Some(file) => {
            let pairs = parse_labels(&base.join(file))?;
            let ids: Vec<String> = pairs.iter().map(|(id, _)| id.clone()).collect();
            if ids != instance_ids {
                return Err(Error::Consistency(format!(
                    "label ids disagree with modality tables: labels {}",
                    id_sample(&ids)
                )));
            }
            Some(pairs.into_iter().map(|(_, c)| c).collect())
        }
        None => None,
    };

    let ds = Dataset {
        instance_ids,
        labels,
        class_count: manifest.class_count,
        modalities,
    };
    ds.validate()?;
    Ok(ds)
}
