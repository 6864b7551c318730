//! Plain-text dataset files.
//!
//! * patch file: header `n d1`, then n rows `x y f1 .. f_d1`
//! * gene file: header `N`, then N rows `gene_id value`
//! * manifest: one row per patient
//!   `patient_id time event slide_file[,slide_file..] gene_file`,
//!   paths relative to the manifest's directory
//!
//! Floats are written with shortest round-trip formatting, so a dataset
//! written and read back compares equal.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::featurize::{GeneRaw, PatchSequence};
use crate::matrix::Matrix;
use crate::survival::SurvivalRecord;

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn field<V: FromStr>(path: &Path, line: usize, what: &str, raw: &str) -> Result<V> {
    raw.parse()
        .map_err(|_| parse_err(path, line, format!("cannot parse {what} from {raw:?}")))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Non-blank lines with 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

pub fn format_patch_file(p: &PatchSequence) -> String {
    let mut s = format!("{} {}\n", p.len(), p.features.cols());
    for (i, pos) in p.positions.iter().enumerate() {
        write!(s, "{} {}", pos[0], pos[1]).unwrap();
        for v in p.features.row(i) {
            write!(s, " {v}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn write_patch_file(path: &Path, p: &PatchSequence) -> Result<()> {
    write_text(path, &format_patch_file(p))
}

/// Reads one slide. The slide id is the file stem.
pub fn read_patch_file(path: &Path) -> Result<PatchSequence> {
    let text = read_text(path)?;
    let mut lines = content_lines(&text);
    let (hl, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "missing `n d1` header"))?;
    let dims: Vec<&str> = header.split_whitespace().collect();
    if dims.len() != 2 {
        return Err(parse_err(path, hl, "header must be `n d1`"));
    }
    let n: usize = field(path, hl, "n", dims[0])?;
    let d1: usize = field(path, hl, "d1", dims[1])?;
    let mut positions = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * d1);
    for (ln, line) in lines {
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != d1 + 2 {
            return Err(parse_err(
                path,
                ln,
                format!("expected {} columns, found {}", d1 + 2, cols.len()),
            ));
        }
        let x: f64 = field(path, ln, "x", cols[0])?;
        let y: f64 = field(path, ln, "y", cols[1])?;
        positions.push([x, y]);
        for c in &cols[2..] {
            data.push(field(path, ln, "feature", c)?);
        }
    }
    if positions.len() != n {
        return Err(parse_err(
            path,
            hl,
            format!("header declares {n} patches, found {}", positions.len()),
        ));
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    PatchSequence::new(id, Matrix::new(n, d1, data)?, positions)
}

pub fn format_gene_file(g: &GeneRaw) -> String {
    let mut s = format!("{}\n", g.values.len());
    for (id, v) in g.gene_ids.iter().zip(&g.values) {
        writeln!(s, "{id} {v}").unwrap();
    }
    s
}

pub fn write_gene_file(path: &Path, g: &GeneRaw) -> Result<()> {
    write_text(path, &format_gene_file(g))
}

pub fn read_gene_file(path: &Path, patient_id: &str) -> Result<GeneRaw> {
    let text = read_text(path)?;
    let mut lines = content_lines(&text);
    let (hl, header) = lines.next().ok_or_else(|| parse_err(path, 1, "missing `N` header"))?;
    let n: usize = field(path, hl, "N", header)?;
    let mut ids = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    for (ln, line) in lines {
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 2 {
            return Err(parse_err(path, ln, "expected `gene_id value`"));
        }
        ids.push(cols[0].to_string());
        values.push(field(path, ln, "gene value", cols[1])?);
    }
    if values.len() != n {
        return Err(parse_err(
            path,
            hl,
            format!("header declares {n} genes, found {}", values.len()),
        ));
    }
    GeneRaw::new(patient_id, ids, values)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub patient_id: String,
    pub time: f64,
    pub event: bool,
    pub slide_files: Vec<PathBuf>,
    pub gene_file: PathBuf,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = read_text(path)?;
    let mut rows = Vec::new();
    for (ln, line) in content_lines(&text) {
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 5 {
            return Err(parse_err(
                path,
                ln,
                format!(
                    "expected 5 columns `patient_id time event slides gene_file`, found {}",
                    cols.len()
                ),
            ));
        }
        let time: f64 = field(path, ln, "time", cols[1])?;
        if !(time > 0.0 && time.is_finite()) {
            return Err(parse_err(path, ln, format!("time {time} must be positive")));
        }
        let event = match cols[2] {
            "1" => true,
            "0" => false,
            other => return Err(parse_err(path, ln, format!("event must be 0 or 1, found {other:?}"))),
        };
        let slide_files: Vec<PathBuf> = cols[3]
            .split(',')
            .filter(|s| !s.is_empty())
            .map(PathBuf::from)
            .collect();
        if slide_files.is_empty() {
            return Err(parse_err(path, ln, "no slide files"));
        }
        rows.push(ManifestRow {
            patient_id: cols[0].to_string(),
            time,
            event,
            slide_files,
            gene_file: PathBuf::from(cols[4]),
        });
    }
    Ok(rows)
}

pub fn format_manifest(rows: &[ManifestRow]) -> String {
    let mut s = String::new();
    for r in rows {
        let slides: Vec<String> = r.slide_files.iter().map(|p| p.display().to_string()).collect();
        writeln!(
            s,
            "{} {} {} {} {}",
            r.patient_id,
            r.time,
            u8::from(r.event),
            slides.join(","),
            r.gene_file.display()
        )
        .unwrap();
    }
    s
}

/// Writes `manifest.tsv`, `slides/` and `genes/` under `dir`; returns the
/// manifest path.
pub fn write_dataset(dir: &Path, records: &[SurvivalRecord]) -> Result<PathBuf> {
    let mut rows = Vec::with_capacity(records.len());
    for r in records {
        let mut slide_files = Vec::with_capacity(r.slides.len());
        for s in &r.slides {
            let rel = PathBuf::from("slides").join(format!("{}.txt", s.slide_id));
            write_patch_file(&dir.join(&rel), s)?;
            slide_files.push(rel);
        }
        let gene_file = PathBuf::from("genes").join(format!("{}.txt", r.patient_id));
        write_gene_file(&dir.join(&gene_file), &r.gene)?;
        rows.push(ManifestRow {
            patient_id: r.patient_id.clone(),
            time: r.time,
            event: r.event,
            slide_files,
            gene_file,
        });
    }
    let manifest = dir.join("manifest.tsv");
    write_text(&manifest, &format_manifest(&rows))?;
    Ok(manifest)
}

pub fn load_dataset(manifest: &Path) -> Result<Vec<SurvivalRecord>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .into_iter()
        .map(|row| {
            let slides = row
                .slide_files
                .iter()
                .map(|f| read_patch_file(&base.join(f)))
                .collect::<Result<Vec<_>>>()?;
            let gene = read_gene_file(&base.join(&row.gene_file), &row.patient_id)?;
            SurvivalRecord::new(row.patient_id, row.time, row.event, slides, gene)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, slides: usize) -> SurvivalRecord {
        let n_slides = slides;
        let slides = (0..n_slides)
            .map(|k| {
                let f = Matrix::new(2, 3, vec![0.1, -2.5, 1e-17, 3.0, 0.3333333333333333, -0.0]).unwrap();
                PatchSequence::new(format!("{id}_{k}"), f, vec![[0.0, 1.0], [0.25, 0.7]]).unwrap()
            })
            .collect();
        let gene = GeneRaw::new(id, vec!["G0".into(), "G1".into()], vec![5.123456789, -1e-300]).unwrap();
        SurvivalRecord::new(id, 12.75, n_slides == 2, slides, gene).unwrap()
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![record("P0", 1), record("P1", 2)];
        let manifest = write_dataset(dir.path(), &records).unwrap();
        let back = load_dataset(&manifest).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn parse_errors_carry_path_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.txt");
        fs::write(&p, "2 1\n0.5 0.5 1.0\n0.5 oops 2.0\n").unwrap();
        match read_patch_file(&p) {
            Err(Error::Parse { line, path, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(path, p);
            }
            other => panic!("{other:?}"),
        }
        fs::write(&p, "3 1\n0.5 0.5 1.0\n").unwrap();
        assert!(matches!(read_patch_file(&p), Err(Error::Parse { line: 1, .. })));
        fs::write(&p, "1 1\n1.5 0.5 1.0\n").unwrap();
        assert!(read_patch_file(&p).is_err());

        let m = dir.path().join("m.tsv");
        fs::write(&m, "P0 3.0 2 a.txt g.txt\n").unwrap();
        assert!(matches!(read_manifest(&m), Err(Error::Parse { line: 1, .. })));
        fs::write(&m, "P0 -1 1 a.txt g.txt\n").unwrap();
        assert!(read_manifest(&m).is_err());
        assert!(matches!(
            load_dataset(&dir.path().join("missing.tsv")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn manifest_accepts_multiple_slides() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.tsv");
        fs::write(&m, "P7 4.5 0 a.txt,b.txt g.txt\n\n").unwrap();
        let rows = read_manifest(&m).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(
            rows[0].slide_files,
            vec![PathBuf::from("a.txt"), PathBuf::from("b.txt")]
        );
        assert!(!rows[0].event);
    }
}
