//! Matrix CSV, labeled CSV and PGM readers and writers.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::apps::image::ImageGrid;
use crate::error::{Error, Result};

fn parse_rows(text: &str, header: bool) -> Result<Vec<Vec<String>>> {
    let rows: Vec<Vec<String>> = text
        .lines()
        .skip(usize::from(header))
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|f| f.trim().to_string()).collect())
        .collect();
    if rows.is_empty() {
        return Err(Error::Data("no data rows".into()));
    }
    let width = rows[0].len();
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != width) {
        return Err(Error::Data(format!("row {} has {} fields, expected {width}", i + 1, r.len())));
    }
    Ok(rows)
}

fn parse_value(field: &str, row: usize, col: usize) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|_| Error::Data(format!("row {}, column {}: '{field}' is not a number", row + 1, col + 1)))
}

/// Parses comma-separated decimal values, one matrix row per line. With
/// `header`, the first line is skipped.
pub fn parse_matrix_csv(text: &str, header: bool) -> Result<DMatrix<f64>> {
    let rows = parse_rows(text, header)?;
    let (n, m) = (rows.len(), rows[0].len());
    let mut out = DMatrix::zeros(n, m);
    for (i, r) in rows.iter().enumerate() {
        for (j, f) in r.iter().enumerate() {
            out[(i, j)] = parse_value(f, i, j)?;
        }
    }
    Ok(out)
}

pub fn read_matrix_csv(path: &Path, header: bool) -> Result<DMatrix<f64>> {
    parse_matrix_csv(&fs::read_to_string(path)?, header)
}

/// Values are written with Rust's shortest round-trip formatting, so
/// reading them back is exact.
pub fn format_matrix_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", m[(i, j)]);
        }
        out.push('\n');
    }
    out
}

/// Quotes a CSV field when it contains a comma, quote or newline.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    fs::write(path, format_matrix_csv(m))?;
    Ok(())
}

/// A samples-by-features table with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTable {
    pub features: DMatrix<f64>,
    /// Labels renumbered `0..k` in order of first appearance.
    pub labels: Vec<usize>,
    pub label_names: Vec<String>,
}

/// Reads a CSV whose `label_col` (default: last) holds the class and whose
/// other columns are numeric features.
pub fn parse_labeled_csv(text: &str, header: bool, label_col: Option<usize>) -> Result<LabeledTable> {
    let rows = parse_rows(text, header)?;
    let width = rows[0].len();
    if width < 2 {
        return Err(Error::Data("labeled data needs a label and at least one feature".into()));
    }
    let lc = label_col.unwrap_or(width - 1);
    if lc >= width {
        return Err(Error::Data(format!("label column {lc} out of range for {width} columns")));
    }
    let mut features = DMatrix::zeros(rows.len(), width - 1);
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut names = Vec::new();
    let mut labels = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        let mut j = 0;
        for (c, f) in r.iter().enumerate() {
            if c == lc {
                continue;
            }
            features[(i, j)] = parse_value(f, i, c)?;
            j += 1;
        }
        let name = r[lc].clone();
        let id = *ids.entry(name.clone()).or_insert_with(|| {
            names.push(name);
            names.len() - 1
        });
        labels.push(id);
    }
    Ok(LabeledTable {
        features,
        labels,
        label_names: names,
    })
}

pub fn read_labeled_csv(path: &Path, header: bool, label_col: Option<usize>) -> Result<LabeledTable> {
    parse_labeled_csv(&fs::read_to_string(path)?, header, label_col)
}

fn pgm_err(msg: impl Into<String>) -> Error {
    Error::Data(format!("PGM: {}", msg.into()))
}

/// Decodes ASCII (P2) or binary (P5, 8 or 16 bit) PGM into `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<ImageGrid> {
    let mut pos = 0;
    let mut token = |bytes: &[u8]| -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(pgm_err("unexpected end of header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token(bytes)?;
    let num = |s: String| s.parse::<usize>().map_err(|_| pgm_err(format!("bad header field '{s}'")));
    let width = num(token(bytes)?)?;
    let height = num(token(bytes)?)?;
    let maxval = num(token(bytes)?)?;
    if maxval == 0 || maxval > 65535 {
        return Err(pgm_err(format!("maxval {maxval} out of range")));
    }
    let n = width * height;
    let scale = maxval as f64;
    let values: Vec<f64> = match magic.as_str() {
        "P2" => (0..n)
            .map(|_| token(bytes).and_then(num).map(|v| v as f64 / scale))
            .collect::<Result<_>>()?,
        "P5" => {
            let data = &bytes[(pos + 1).min(bytes.len())..];
            let bpp = if maxval < 256 { 1 } else { 2 };
            if data.len() < n * bpp {
                return Err(pgm_err("truncated pixel data"));
            }
            (0..n)
                .map(|i| {
                    let v = if bpp == 1 {
                        data[i] as f64
                    } else {
                        u16::from_be_bytes([data[2 * i], data[2 * i + 1]]) as f64
                    };
                    v / scale
                })
                .collect()
        }
        other => return Err(pgm_err(format!("unsupported magic '{other}'"))),
    };
    if values.iter().any(|&v| v > 1.0) {
        return Err(pgm_err("pixel exceeds maxval"));
    }
    ImageGrid::new(DMatrix::from_row_slice(height, width, &values))
}

pub fn read_pgm(path: &Path) -> Result<ImageGrid> {
    decode_pgm(&fs::read(path)?)
}

/// Encodes as 8-bit binary PGM (P5).
pub fn encode_pgm(img: &ImageGrid) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    for i in 0..img.height() {
        for j in 0..img.width() {
            out.push((img.pixels()[(i, j)] * 255.0).round() as u8);
        }
    }
    out
}

pub fn write_pgm(path: &Path, img: &ImageGrid) -> Result<()> {
    fs::write(path, encode_pgm(img))?;
    Ok(())
}

/// Reads an image from `.pgm`, or from a CSV matrix of values in `[0, 1]`.
pub fn read_image(path: &Path, header: bool) -> Result<ImageGrid> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("pgm") => read_pgm(path),
        _ => ImageGrid::new(read_matrix_csv(path, header)?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_csv_round_trip() {
        let m = DMatrix::from_row_slice(2, 3, &[0.1, -2.0, 1e-17, 3.0, 0.333333333333, 7.0]);
        assert_eq!(parse_matrix_csv(&format_matrix_csv(&m), false).unwrap(), m);
        let with_header = format!("a,b,c\n{}", format_matrix_csv(&m));
        assert_eq!(parse_matrix_csv(&with_header, true).unwrap(), m);
    }

    #[test]
    fn matrix_csv_errors() {
        assert!(parse_matrix_csv("1,2\n3\n", false).is_err());
        assert!(parse_matrix_csv("1,x\n", false).is_err());
        assert!(parse_matrix_csv("", false).is_err());
    }

    #[test]
    fn csv_fields_are_quoted_when_needed() {
        assert_eq!(csv_field("l2"), "l2");
        assert_eq!(csv_field("qhuber:tau=0.5,kappa=1"), "\"qhuber:tau=0.5,kappa=1\"");
        assert_eq!(csv_field("a\"b"), "\"a\"\"b\"");
    }

    #[test]
    fn labeled_csv_columns() {
        let t = parse_labeled_csv("1,2,b\n3,4,a\n5,6,b\n", false, None).unwrap();
        assert_eq!(t.labels, vec![0, 1, 0]);
        assert_eq!(t.label_names, vec!["b", "a"]);
        assert_eq!(t.features, DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let first = parse_labeled_csv("x,1,2\ny,3,4\n", false, Some(0)).unwrap();
        assert_eq!(first.labels, vec![0, 1]);
        assert_eq!(first.features[(1, 1)], 4.0);
    }

    #[test]
    fn pgm_formats() {
        let ascii = b"P2\n# comment\n3 2\n4\n0 1 2\n3 4 0\n";
        let img = decode_pgm(ascii).unwrap();
        assert_eq!((img.height(), img.width()), (2, 3));
        assert_eq!(img.pixels()[(1, 1)], 1.0);
        assert_eq!(img.pixels()[(0, 2)], 0.5);
        let bin = encode_pgm(&img);
        let back = decode_pgm(&bin).unwrap();
        assert!((back.pixels() - img.pixels()).amax() < 1.0 / 255.0);
        assert!(decode_pgm(b"P6\n1 1\n255\n\0").is_err());
    }
}
