//! Tab-separated file formats.
//!
//! Matrices carry a header row and a row-name first column. Reals are
//! written with 17 significant digits so a write/read cycle is exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::glasso::ZeroEdgeSet;
use crate::pln::CountDataset;

/// A matrix with row and column names.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedMatrix {
    pub corner: String,
    pub row_names: Vec<String>,
    pub col_names: Vec<String>,
    pub values: DMatrix<f64>,
}

pub fn format_real(x: f64) -> String {
    if x == 0.0 {
        // normalise -0.0
        return "0".into();
    }
    format!("{x:.16e}")
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_real(field: &str, line: usize) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| parse_err(line, format!("'{field}' is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("'{field}' is not finite")));
    }
    Ok(v)
}

/// Non-empty lines with their 1-based line numbers. Lines starting with
/// `#` are skipped.
fn lines(reader: impl Read) -> Result<Vec<(usize, String)>> {
    let mut out = Vec::new();
    for (k, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        out.push((k + 1, trimmed.to_string()));
    }
    Ok(out)
}

pub fn read_matrix(reader: impl Read) -> Result<NamedMatrix> {
    let lines = lines(reader)?;
    let Some(((_, header), body)) = lines.split_first() else {
        return Err(parse_err(1, "empty matrix file"));
    };
    let mut head = header.split('\t');
    let corner = head.next().unwrap_or_default().to_string();
    let col_names: Vec<String> = head.map(str::to_string).collect();
    let p = col_names.len();
    let mut row_names = Vec::with_capacity(body.len());
    let mut data = Vec::with_capacity(body.len() * p);
    for (line, text) in body {
        let mut fields = text.split('\t');
        row_names.push(fields.next().unwrap_or_default().to_string());
        let before = data.len();
        for f in fields {
            data.push(parse_real(f, *line)?);
        }
        if data.len() - before != p {
            return Err(parse_err(*line, format!("expected {p} values, found {}", data.len() - before)));
        }
    }
    Ok(NamedMatrix {
        corner,
        row_names,
        col_names,
        values: DMatrix::from_row_slice(body.len(), p, &data),
    })
}

pub fn write_matrix(mut writer: impl Write, m: &NamedMatrix) -> Result<()> {
    write!(writer, "{}", m.corner)?;
    for c in &m.col_names {
        write!(writer, "\t{c}")?;
    }
    writeln!(writer)?;
    for (i, r) in m.row_names.iter().enumerate() {
        write!(writer, "{r}")?;
        for j in 0..m.values.ncols() {
            write!(writer, "\t{}", format_real(m.values[(i, j)]))?;
        }
        writeln!(writer)?;
    }
    Ok(())
}

/// Two-column `name<TAB>value` table with a header line.
pub fn read_named_values(reader: impl Read) -> Result<(Vec<String>, Vec<f64>)> {
    let lines = lines(reader)?;
    let mut names = Vec::new();
    let mut values = Vec::new();
    for (line, text) in lines.iter().skip(1) {
        let fields: Vec<&str> = text.split('\t').collect();
        if fields.len() != 2 {
            return Err(parse_err(*line, format!("expected 2 columns, found {}", fields.len())));
        }
        names.push(fields[0].to_string());
        values.push(parse_real(fields[1], *line)?);
    }
    Ok((names, values))
}

pub fn write_named_values(mut writer: impl Write, header: (&str, &str), names: &[String], values: &[f64]) -> Result<()> {
    writeln!(writer, "{}\t{}", header.0, header.1)?;
    for (n, v) in names.iter().zip(values) {
        writeln!(writer, "{n}\t{}", format_real(*v))?;
    }
    Ok(())
}

pub fn read_labels(reader: impl Read) -> Result<(Vec<String>, Vec<usize>)> {
    let lines = lines(reader)?;
    let mut names = Vec::new();
    let mut labels = Vec::new();
    for (line, text) in lines.iter().skip(1) {
        let fields: Vec<&str> = text.split('\t').collect();
        if fields.len() != 2 {
            return Err(parse_err(*line, format!("expected 2 columns, found {}", fields.len())));
        }
        names.push(fields[0].to_string());
        labels.push(
            fields[1]
                .trim()
                .parse()
                .map_err(|_| parse_err(*line, format!("'{}' is not a label", fields[1])))?,
        );
    }
    Ok((names, labels))
}

pub fn write_labels(mut writer: impl Write, names: &[String], labels: &[usize]) -> Result<()> {
    writeln!(writer, "sample\tlabel")?;
    for (n, l) in names.iter().zip(labels) {
        writeln!(writer, "{n}\t{l}")?;
    }
    Ok(())
}

/// Counts as a samples × features matrix. Scaling defaults to the
/// row-total estimate when not supplied.
pub fn read_counts(reader: impl Read, scaling: Option<Vec<f64>>) -> Result<CountDataset> {
    let m = read_matrix(reader)?;
    if m.values.nrows() == 0 || m.values.ncols() == 0 {
        return Err(parse_err(1, "count matrix has no rows or no columns"));
    }
    let rows_total_zero = (0..m.values.nrows()).find(|&i| m.values.row(i).sum() == 0.0);
    let scaling = match scaling {
        Some(s) => s,
        None => {
            if let Some(i) = rows_total_zero {
                return Err(Error::InvalidInput(format!(
                    "sample '{}' has no counts; supply --scaling or drop it",
                    m.row_names[i]
                )));
            }
            (0..m.values.nrows()).map(|i| m.values.row(i).sum() / 1e4).collect()
        }
    };
    CountDataset::new(m.values, scaling, m.col_names)?.with_sample_names(m.row_names)
}

pub fn write_counts(writer: impl Write, data: &CountDataset) -> Result<()> {
    let mut w = writer;
    write!(w, "sample")?;
    for c in data.feature_names() {
        write!(w, "\t{c}")?;
    }
    writeln!(w)?;
    let counts = data.counts();
    for (i, r) in data.sample_names().iter().enumerate() {
        write!(w, "{r}")?;
        for j in 0..data.p() {
            write!(w, "\t{}", counts[(i, j)] as u64)?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// One row of an edge list.
#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub a: String,
    pub b: String,
    pub partial_correlation: f64,
}

/// Nonzero off-diagonal pairs of a precision matrix with their partial
/// correlations `−Θ_lm / √(Θ_ll Θ_mm)`.
pub fn edges_from_precision(theta: &DMatrix<f64>, names: &[String]) -> Vec<Edge> {
    let p = theta.nrows();
    let mut out = Vec::new();
    for l in 0..p {
        for m in l + 1..p {
            let v = theta[(l, m)];
            if v != 0.0 {
                out.push(Edge {
                    a: names[l].clone(),
                    b: names[m].clone(),
                    partial_correlation: -v / (theta[(l, l)] * theta[(m, m)]).sqrt(),
                });
            }
        }
    }
    out
}

pub fn write_edges(mut writer: impl Write, edges: &[Edge]) -> Result<()> {
    writeln!(writer, "feature_a\tfeature_b\tpartial_correlation")?;
    for e in edges {
        writeln!(writer, "{}\t{}\t{}", e.a, e.b, format_real(e.partial_correlation))?;
    }
    Ok(())
}

pub fn read_edges(reader: impl Read) -> Result<Vec<Edge>> {
    let lines = lines(reader)?;
    let mut out = Vec::new();
    for (line, text) in lines.iter().skip(1) {
        let f: Vec<&str> = text.split('\t').collect();
        if f.len() != 3 {
            return Err(parse_err(*line, format!("expected 3 columns, found {}", f.len())));
        }
        out.push(Edge {
            a: f[0].to_string(),
            b: f[1].to_string(),
            partial_correlation: parse_real(f[2], *line)?,
        });
    }
    Ok(out)
}

/// Pairs of feature names, one pair per line. A first line whose names
/// are not both features is taken as a header.
pub fn read_zero_edges(reader: impl Read, feature_names: &[String]) -> Result<ZeroEdgeSet> {
    let index = |name: &str| feature_names.iter().position(|f| f == name.trim());
    let p = feature_names.len();
    let mut set = ZeroEdgeSet::new();
    for (k, (line, text)) in lines(reader)?.iter().enumerate() {
        let f: Vec<&str> = text.split('\t').collect();
        if f.len() < 2 {
            return Err(parse_err(*line, "expected two feature names"));
        }
        match (index(f[0]), index(f[1])) {
            (Some(a), Some(b)) => {
                if a == b {
                    return Err(parse_err(*line, format!("'{}' is paired with itself", f[0])));
                }
                set.insert(a, b, p)?;
            }
            _ if k == 0 => continue,
            (a, _) => {
                let missing = if a.is_none() { f[0] } else { f[1] };
                return Err(parse_err(*line, format!("unknown feature '{missing}'")));
            }
        }
    }
    Ok(set)
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
}
