use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"FEAT";
pub const LABEL_MAGIC: &[u8; 4] = b"LABL";

/// Contents of `splits.json`. All ids are 0-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitsFile {
    pub seen_classes: Vec<usize>,
    pub unseen_classes: Vec<usize>,
    pub train_idx: Vec<usize>,
    pub test_seen_idx: Vec<usize>,
    pub test_unseen_idx: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_classes: Option<Vec<usize>>,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, path: &Path) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Data(format!("{}: truncated file", path.display())));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn take_u32(bytes: &mut &[u8], path: &Path) -> Result<u32> {
    let b = take(bytes, 4, path)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn check_magic(bytes: &mut &[u8], magic: &[u8; 4], path: &Path) -> Result<()> {
    let m = take(bytes, 4, path)?;
    if m != magic {
        return Err(Error::Data(format!(
            "{}: expected magic {:?}, found {:?}",
            path.display(),
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(m)
        )));
    }
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<Tensor> {
    let raw = read(path)?;
    let mut b = raw.as_slice();
    check_magic(&mut b, FEATURE_MAGIC, path)?;
    let rows = take_u32(&mut b, path)? as usize;
    let cols = take_u32(&mut b, path)? as usize;
    let n = rows * cols;
    if b.len() != n * 4 {
        return Err(Error::Data(format!(
            "{}: header says {rows}x{cols} but payload has {} bytes",
            path.display(),
            b.len()
        )));
    }
    let data = b
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::matrix(rows, cols, data).map_err(|e| e.context(path.display()))
}

pub fn write_matrix(path: &Path, t: &Tensor) -> Result<()> {
    let mut out = Vec::with_capacity(12 + t.numel() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write(path, &out)
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let raw = read(path)?;
    let mut b = raw.as_slice();
    check_magic(&mut b, LABEL_MAGIC, path)?;
    let n = take_u32(&mut b, path)? as usize;
    if b.len() != n * 4 {
        return Err(Error::Data(format!(
            "{}: header says {n} labels but payload has {} bytes",
            path.display(),
            b.len()
        )));
    }
    Ok(b.chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect())
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len() * 4);
    out.extend_from_slice(LABEL_MAGIC);
    out.extend_from_slice(&(labels.len() as u32).to_le_bytes());
    for &y in labels {
        out.extend_from_slice(&(y as u32).to_le_bytes());
    }
    write(path, &out)
}

fn read_splits(path: &Path) -> Result<SplitsFile> {
    let raw = read(path)?;
    serde_json::from_slice(&raw)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn assemble(visual: Tensor, labels: Vec<usize>, semantic: Tensor, s: SplitsFile) -> Result<Dataset> {
    if visual.rows() != labels.len() {
        return Err(Error::Data(format!(
            "visual.f32bin has {} rows but labels.u32bin has {} labels",
            visual.rows(),
            labels.len()
        )));
    }
    let declared = s.seen_classes.len() + s.unseen_classes.len();
    if semantic.rows() != declared {
        return Err(Error::Data(format!(
            "semantic.f32bin has {} rows but splits.json declares {declared} classes",
            semantic.rows()
        )));
    }
    Dataset {
        visual,
        labels,
        semantic,
        seen_classes: s.seen_classes.into_iter().collect(),
        unseen_classes: s.unseen_classes.into_iter().collect(),
        train_idx: s.train_idx,
        test_seen_idx: s.test_seen_idx,
        test_unseen_idx: s.test_unseen_idx,
        val_classes: s.val_classes.map(|v| v.into_iter().collect::<BTreeSet<_>>()),
    }
    .validated()
}

/// Reads a dataset directory (`visual.f32bin`, `semantic.f32bin`,
/// `labels.u32bin`, `splits.json`) and validates it. A directory holding
/// `visual.csv` instead of `visual.f32bin` goes through [`import_csv`].
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    if !dir.join("visual.f32bin").exists() && dir.join("visual.csv").exists() {
        return import_csv(dir);
    }
    let visual = read_matrix(&dir.join("visual.f32bin"))?;
    let semantic = read_matrix(&dir.join("semantic.f32bin"))?;
    let labels = read_labels(&dir.join("labels.u32bin"))?;
    let splits = read_splits(&dir.join("splits.json"))?;
    assemble(visual, labels, semantic, splits).map_err(|e| e.context(dir.display()))
}

pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_matrix(&dir.join("visual.f32bin"), &ds.visual)?;
    write_matrix(&dir.join("semantic.f32bin"), &ds.semantic)?;
    write_labels(&dir.join("labels.u32bin"), &ds.labels)?;
    let splits = SplitsFile {
        seen_classes: ds.seen_classes.iter().copied().collect(),
        unseen_classes: ds.unseen_classes.iter().copied().collect(),
        train_idx: ds.train_idx.clone(),
        test_seen_idx: ds.test_seen_idx.clone(),
        test_unseen_idx: ds.test_unseen_idx.clone(),
        val_classes: ds.val_classes.as_ref().map(|v| v.iter().copied().collect()),
    };
    let json = serde_json::to_vec_pretty(&splits)?;
    write(&dir.join("splits.json"), &json)
}

fn read_csv_matrix(path: &Path) -> Result<Tensor> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let row = rec
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f32>()
                    .map(|v| v as f64)
                    .map_err(|e| Error::Data(format!("{}: `{f}`: {e}", path.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Tensor::from_rows(&rows).map_err(|e| e.context(path.display()))
}

/// Reads `visual.csv`, `semantic.csv`, `labels.csv` and `splits.json` from
/// `dir`. Values are parsed as `f32`, so the result is identical to what the
/// binary format would hold.
pub fn import_csv(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let visual = read_csv_matrix(&dir.join("visual.csv"))?;
    let semantic = read_csv_matrix(&dir.join("semantic.csv"))?;
    let label_path = dir.join("labels.csv");
    let text = fs::read_to_string(&label_path).map_err(|e| Error::io(&label_path, e))?;
    let labels = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|e| Error::Data(format!("labels.csv: `{s}`: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let splits = read_splits(&dir.join("splits.json"))?;
    assemble(visual, labels, semantic, splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_benchmark, SynthSpec};

    #[test]
    fn round_trip_and_magic_check() {
        let ds = synth_benchmark(&SynthSpec::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);

        let p = dir.path().join("labels.u32bin");
        let mut b = fs::read(&p).unwrap();
        b[0] = b'X';
        fs::write(&p, b).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn missing_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("visual.f32bin"), "{err}");
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let mut ds = synth_benchmark(&SynthSpec::default()).unwrap();
        let i = ds.test_unseen_idx[0];
        ds.labels[i] = 999;
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("label 999"), "{err}");
    }

    #[test]
    fn csv_shim_matches_binary() {
        let ds = synth_benchmark(&SynthSpec {
            samples_per_class: 3,
            ..SynthSpec::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let dump = |t: &Tensor| {
            (0..t.rows())
                .map(|i| {
                    t.row(i)
                        .iter()
                        .map(|v| format!("{:e}", *v as f32))
                        .collect::<Vec<_>>()
                        .join(",")
                })
                .collect::<Vec<_>>()
                .join("\n")
        };
        fs::write(dir.path().join("visual.csv"), dump(&ds.visual)).unwrap();
        fs::write(dir.path().join("semantic.csv"), dump(&ds.semantic)).unwrap();
        let labels: Vec<String> = ds.labels.iter().map(ToString::to_string).collect();
        fs::write(dir.path().join("labels.csv"), labels.join("\n")).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(import_csv(dir.path()).unwrap(), ds);
    }
}
