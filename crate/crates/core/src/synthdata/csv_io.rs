use std::io::Write;
use std::path::Path;

use super::{DomainDataset, Role, Sample};
use crate::error::{Error, Result};

fn header(widths: &[usize]) -> Vec<String> {
    let mut cols = vec!["label".to_string()];
    for (u, &w) in widths.iter().enumerate() {
        cols.extend((0..w).map(|i| format!("f{u}_{i}")));
    }
    cols
}

/// Writes `label,f0_0,...` with one row per sample. Held-out target labels
/// are written when known, otherwise `-1`. Values use the shortest decimal
/// form that parses back to the same bits.
pub fn write_domain_csv(ds: &DomainDataset, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{}", header(ds.widths()).join(","))?;
    let labels = ds.held_out_labels();
    for (i, s) in ds.samples().iter().enumerate() {
        let label = labels.as_ref().map_or(-1, |l| l[i] as i64);
        write!(out, "{label}")?;
        for v in s.features.iter().flatten() {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a domain file. Line numbers in errors count the header as line 1.
pub fn load_domain_csv(path: &Path, role: Role, widths: &[usize]) -> Result<DomainDataset> {
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "domain".into());
    let expected = 1 + widths.iter().sum::<usize>();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Parse {
            line: 0,
            detail: format!("{}: {e}", path.display()),
        })?;
    let head = reader.headers().map_err(|e| Error::Parse {
        line: 1,
        detail: e.to_string(),
    })?;
    if head.len() != expected || head.get(0) != Some("label") {
        return Err(Error::Parse {
            line: 1,
            detail: format!("header has {} columns, expected {expected} starting with 'label'", head.len()),
        });
    }

    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            detail: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != expected {
            return Err(Error::Parse {
                line,
                detail: format!("row {line} has {} values, expected {expected}", record.len()),
            });
        }
        let label = match record[0].trim() {
            "0" => Some(0),
            "1" => Some(1),
            "-1" => {
                if role == Role::Source {
                    return Err(Error::contract(format!(
                        "row {line}: label -1 (unlabelled) is not allowed in a source file"
                    )));
                }
                None
            }
            other => {
                return Err(Error::Parse {
                    line,
                    detail: format!("row {line}: label '{other}' is not one of 0, 1, -1"),
                })
            }
        };
        let mut values = Vec::with_capacity(expected - 1);
        for (c, cell) in record.iter().enumerate().skip(1) {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line,
                detail: format!("row {line}, column {c}: '{cell}' is not a number"),
            })?;
            values.push(v);
        }
        let mut features = Vec::with_capacity(widths.len());
        let mut offset = 0;
        for &w in widths {
            features.push(values[offset..offset + w].to_vec());
            offset += w;
        }
        samples.push(Sample {
            features,
            label,
            domain: id.clone(),
        });
    }
    if role == Role::Target && samples.iter().any(|s| s.label.is_none()) {
        // Partially labelled targets carry no usable held-out labels.
        samples.iter_mut().for_each(|s| s.label = None);
    }
    DomainDataset::new(id, role, widths.to_vec(), samples)
}
