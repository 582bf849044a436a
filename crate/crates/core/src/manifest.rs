//! CSV manifest ingestion: a `path,label` header followed by one PPM path
//! (relative to a base directory) and integer label per row.
//!
//! Rows are numbered from 1, counting data rows only.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::LabeledDataset;
use crate::ppm::load_ppm;

pub fn load_manifest(csv_text: &str, base_dir: &Path) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(csv_text.as_bytes());
    let headers = reader.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "path" || &headers[1] != "label" {
        return Err(Error::Manifest { row: 0, message: "header must be `path,label`".into() });
    }

    let mut items = Vec::new();
    let mut dims = None;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Manifest { row, message: e.to_string() })?;
        if record.len() != 2 {
            return Err(Error::Manifest { row, message: format!("expected 2 fields, found {}", record.len()) });
        }
        let label: usize =
            record[1].parse().map_err(|_| Error::Manifest { row, message: "non-integer label".into() })?;
        let path = base_dir.join(&record[0]);
        let bytes = std::fs::read(&path)
            .map_err(|e| Error::Manifest { row, message: format!("missing file {}: {e}", path.display()) })?;
        let img = load_ppm(&bytes).map_err(|e| Error::Manifest { row, message: e.to_string() })?;
        let these = (img.height(), img.width());
        match dims {
            None => dims = Some(these),
            Some(d) if d != these => return Err(Error::Manifest { row, message: "dimension mismatch".into() }),
            _ => {}
        }
        items.push((img, label));
    }
    if items.is_empty() {
        return Err(Error::Manifest { row: 0, message: "manifest has no rows".into() });
    }
    let class_count = items.iter().map(|(_, l)| *l).max().unwrap_or(0) + 1;
    LabeledDataset::new(items, class_count)
}

/// Writes every image as `NNNNN.ppm` under `dir` plus a `manifest.csv`.
pub fn write_dataset(dataset: &LabeledDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("path,label\n");
    for (i, (img, label)) in dataset.items().iter().enumerate() {
        let name = format!("{i:05}.ppm");
        crate::ppm::write_ppm_file(&dir.join(&name), img)?;
        manifest.push_str(&format!("{name},{label}\n"));
    }
    let path = dir.join("manifest.csv");
    std::fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ImageTensor;
    use crate::ppm::save_ppm;

    fn write(dir: &Path, name: &str, side: usize) {
        std::fs::write(dir.join(name), save_ppm(&ImageTensor::filled(side, side, 0.5))).unwrap();
    }

    #[test]
    fn two_rows() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.ppm", 32);
        write(dir.path(), "b.ppm", 32);
        let ds = load_manifest("path,label\na.ppm,0\nb.ppm,3\n", dir.path()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.class_count(), 4);
        assert_eq!(ds.items()[1].1, 3);
    }

    #[test]
    fn non_integer_label() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.ppm", 32);
        let err = load_manifest("path,label\na.ppm,0\na.ppm,1\na.ppm,cat\n", dir.path()).unwrap_err();
        assert_eq!(err.to_string(), "row 3: non-integer label");
    }

    #[test]
    fn dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.ppm", 32);
        write(dir.path(), "b.ppm", 16);
        let err = load_manifest("path,label\na.ppm,0\nb.ppm,1\n", dir.path()).unwrap_err();
        assert_eq!(err.to_string(), "row 2: dimension mismatch");
    }

    #[test]
    fn missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_manifest("path,label\nnope.ppm,0\n", dir.path()).unwrap_err();
        assert!(err.to_string().starts_with("row 1: missing file"), "{err}");
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let ds = crate::shapes::gen_shapes_dataset(4, 10, 16).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
        let back = load_manifest(&text, dir.path()).unwrap();
        assert_eq!(back.len(), 10);
        for ((a, la), (b, lb)) in ds.items().iter().zip(back.items()) {
            assert_eq!(la, lb);
            assert_eq!(&a.quantized(), b);
        }
    }
}
