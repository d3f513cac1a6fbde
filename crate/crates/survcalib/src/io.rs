//! Delimited-text interfaces: long-format cohort CSV, calibration coefficient
//! files and metrics tables.
//!
//! The long format has one row per (subject, visit): columns `ID`,
//! `subset_ind`, the error-prone covariates, their reference measures (present
//! only on calibration-subset rows), the precise covariates, an optional
//! stratum label, `y` and `t`. Missing values are empty fields or the literal
//! `NA`.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::calibration::CalibrationModel;
use crate::data::{Cohort, LongRow};

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: cannot parse `{value}` in column `{column}`")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("calibration file invalid: {0}")]
    CalibrationFormat(String),
}

/// Column names binding a CSV file to the long format.
#[derive(Debug, Clone)]
pub struct ColumnSpec {
    pub id: String,
    pub subset: String,
    pub x_star: Vec<String>,
    pub x_double_star: Vec<String>,
    pub z: Vec<String>,
    pub stratum: Option<String>,
    pub y: String,
    pub t: String,
}

impl ColumnSpec {
    /// Conventional names: reference columns derived from the error-prone ones
    /// (`x_1_star` -> `x_1_starstar`).
    pub fn new(x_star: Vec<String>, z: Vec<String>, stratum: Option<String>) -> Self {
        let x_double_star = x_star.iter().map(|n| derive_reference_name(n)).collect();
        Self {
            id: "ID".into(),
            subset: "subset_ind".into(),
            x_star,
            x_double_star,
            z,
            stratum,
            y: "y".into(),
            t: "t".into(),
        }
    }
}

pub fn derive_reference_name(x_star_name: &str) -> String {
    if let Some(stem) = x_star_name.strip_suffix("_star") {
        format!("{stem}_starstar")
    } else {
        format!("{x_star_name}_starstar")
    }
}

/// Matches `prefix<k>suffix` style names; `pattern` is e.g. "x_*_star" or
/// "z_*" with `*` standing for the index digits.
pub fn match_indexed(header: &str, pattern: &str) -> Option<usize> {
    let star = pattern.find('*')?;
    let (prefix, suffix) = (&pattern[..star], &pattern[star + 1..]);
    let rest = header.strip_prefix(prefix)?;
    let digits = rest.strip_suffix(suffix)?;
    if digits.is_empty() || !digits.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

/// Columns matching an indexed naming convention, in numeric order.
pub fn autodetect_columns(path: &Path, pattern: &str) -> Result<Vec<String>, IoError> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?;
    let mut found: Vec<(usize, String)> = headers
        .iter()
        .filter_map(|h| match_indexed(h, pattern).map(|idx| (idx, h.to_string())))
        .collect();
    found.sort();
    Ok(found.into_iter().map(|(_, name)| name).collect())
}

pub fn has_column(path: &Path, name: &str) -> Result<bool, IoError> {
    let mut reader = csv::Reader::from_path(path)?;
    Ok(reader.headers()?.iter().any(|c| c == name))
}

/// Builds a [`ColumnSpec`] from explicit column lists, falling back to the
/// `x_<k>_star` / `z_<k>` conventions and a `stratum` column when present.
pub fn resolve_column_spec(
    path: &Path,
    x_star: &[String],
    z: &[String],
    stratum: Option<&str>,
) -> Result<ColumnSpec, IoError> {
    let x_star = if x_star.is_empty() {
        autodetect_columns(path, "x_*_star")?
    } else {
        x_star.to_vec()
    };
    let z = if z.is_empty() {
        autodetect_columns(path, "z_*")?
    } else {
        z.to_vec()
    };
    let stratum = match stratum {
        Some(s) => Some(s.to_string()),
        None if has_column(path, "stratum")? => Some("stratum".to_string()),
        None => None,
    };
    Ok(ColumnSpec::new(x_star, z, stratum))
}

fn is_missing(field: &str) -> bool {
    let f = field.trim();
    f.is_empty() || f.eq_ignore_ascii_case("na")
}

fn parse_f64(field: &str, row: usize, column: &str) -> Result<f64, IoError> {
    field.trim().parse::<f64>().map_err(|_| IoError::Parse {
        row,
        column: column.into(),
        value: field.into(),
    })
}

/// Reads long-format rows from a comma-separated file with a header row.
pub fn read_long_csv(path: &Path, cols: &ColumnSpec) -> Result<Vec<LongRow>, IoError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| -> Result<usize, IoError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IoError::MissingColumn(name.into()))
    };

    let id_i = find(&cols.id)?;
    let subset_i = find(&cols.subset)?;
    let y_i = find(&cols.y)?;
    let t_i = find(&cols.t)?;
    let x_i: Vec<usize> = cols
        .x_star
        .iter()
        .map(|c| find(c))
        .collect::<Result<_, _>>()?;
    // Reference columns may be absent entirely when no calibration subset is shipped.
    let xx_i: Vec<Option<usize>> = cols
        .x_double_star
        .iter()
        .map(|c| headers.iter().position(|h| h == c))
        .collect();
    let z_i: Vec<usize> = cols.z.iter().map(|c| find(c)).collect::<Result<_, _>>()?;
    let stratum_i = match &cols.stratum {
        Some(c) => Some(find(c)?),
        None => None,
    };

    let mut rows = Vec::new();
    for (rec_no, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row_no = rec_no + 2; // 1-based, after header
        let get = |i: usize| rec.get(i).unwrap_or("");

        let subset_raw = get(subset_i);
        let subset_ind = match subset_raw.trim() {
            "1" | "true" | "TRUE" => true,
            "0" | "false" | "FALSE" | "" => false,
            other => {
                return Err(IoError::Parse {
                    row: row_no,
                    column: cols.subset.clone(),
                    value: other.into(),
                })
            }
        };
        let y_raw = get(y_i);
        let y_val = parse_f64(y_raw, row_no, &cols.y)?;
        let y = if y_val == 0.0 {
            0u8
        } else if y_val == 1.0 {
            1u8
        } else {
            return Err(IoError::Parse {
                row: row_no,
                column: cols.y.clone(),
                value: y_raw.into(),
            });
        };

        let mut x_star = Vec::with_capacity(x_i.len());
        for (ci, name) in x_i.iter().zip(&cols.x_star) {
            x_star.push(parse_f64(get(*ci), row_no, name)?);
        }
        let mut x_double_star = Vec::with_capacity(xx_i.len());
        for (ci, name) in xx_i.iter().zip(&cols.x_double_star) {
            match ci {
                Some(i) if !is_missing(get(*i)) => {
                    x_double_star.push(Some(parse_f64(get(*i), row_no, name)?));
                }
                _ => x_double_star.push(None),
            }
        }
        let mut z = Vec::with_capacity(z_i.len());
        for (ci, name) in z_i.iter().zip(&cols.z) {
            z.push(parse_f64(get(*ci), row_no, name)?);
        }
        let stratum = match stratum_i {
            Some(i) => {
                let s = get(i);
                if is_missing(s) {
                    "all".to_string()
                } else {
                    s.to_string()
                }
            }
            None => "all".to_string(),
        };

        rows.push(LongRow {
            id: get(id_i).to_string(),
            subset_ind,
            x_star,
            x_double_star,
            z,
            stratum,
            y,
            t: parse_f64(get(t_i), row_no, &cols.t)?,
        });
    }
    Ok(rows)
}

/// Writes a cohort back to long format with the given column names.
pub fn write_long_csv(path: &Path, cohort: &Cohort, cols: &ColumnSpec) -> Result<(), IoError> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = vec![cols.id.clone(), cols.subset.clone()];
    header.extend(cols.x_star.iter().cloned());
    header.extend(cols.x_double_star.iter().cloned());
    header.extend(cols.z.iter().cloned());
    if let Some(s) = &cols.stratum {
        header.push(s.clone());
    }
    header.push(cols.y.clone());
    header.push(cols.t.clone());
    writer.write_record(&header)?;

    for row in cohort.to_long_rows() {
        let mut rec: Vec<String> = vec![row.id.clone(), u8::from(row.subset_ind).to_string()];
        rec.extend(row.x_star.iter().map(|v| format!("{v}")));
        rec.extend(row.x_double_star.iter().map(|v| match v {
            Some(x) => format!("{x}"),
            None => "NA".to_string(),
        }));
        rec.extend(row.z.iter().map(|v| format!("{v}")));
        if cols.stratum.is_some() {
            rec.push(row.stratum.clone());
        }
        rec.push(row.y.to_string());
        rec.push(format!("{}", row.t));
        writer.write_record(&rec)?;
    }
    writer.flush()?;
    Ok(())
}

/// On-disk form of a fitted calibration: coefficients, covariance and the
/// column names they were fitted against, so a pre-fitted equation can be
/// supplied without the raw subset data.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CalibrationFile {
    pub x_star_columns: Vec<String>,
    pub z_columns: Vec<String>,
    pub model: CalibrationModel,
}

pub fn write_calibration(path: &Path, file: &CalibrationFile) -> Result<(), IoError> {
    let text = toml::to_string_pretty(file)
        .map_err(|e| IoError::CalibrationFormat(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn read_calibration(path: &Path) -> Result<CalibrationFile, IoError> {
    let text = fs::read_to_string(path)?;
    let file: CalibrationFile =
        toml::from_str(&text).map_err(|e| IoError::CalibrationFormat(e.to_string()))?;
    let m = &file.model;
    let w = m.p + m.q;
    let shape_ok = m.delta0.len() == m.p
        && m.delta1.len() == m.p
        && m.delta1.iter().all(|r| r.len() == m.p)
        && m.delta2.len() == m.p
        && m.delta2.iter().all(|r| r.len() == m.q)
        && m.coef_covariance.len() == m.p * w
        && m.coef_covariance.iter().all(|r| r.len() == m.p * w);
    if !shape_ok {
        return Err(IoError::CalibrationFormat(
            "coefficient blocks have inconsistent dimensions".into(),
        ));
    }
    Ok(file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ingest_long, IngestOptions};

    #[test]
    fn csv_round_trip_with_missing_reference() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("long.csv");
        let text = "\
ID,subset_ind,x_1_star,x_1_starstar,z_1,z_2,y,t
1,1,0.5,0.48,1.0,-0.3,0,1
1,1,0.5,0.48,1.0,-0.3,1,2
2,0,-0.2,NA,0.1,0.6,0,1
2,0,-0.2,,0.1,0.6,0,2
";
        fs::write(&path, text).unwrap();
        let cols = ColumnSpec::new(
            vec!["x_1_star".into()],
            vec!["z_1".into(), "z_2".into()],
            None,
        );
        let rows = read_long_csv(&path, &cols).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].x_double_star[0], Some(0.48));
        assert_eq!(rows[2].x_double_star[0], None);

        let (cohort, _) = ingest_long(&rows, &IngestOptions::default()).unwrap();
        let out = dir.path().join("out.csv");
        write_long_csv(&out, &cohort, &cols).unwrap();
        let rows2 = read_long_csv(&out, &cols).unwrap();
        let (cohort2, _) = ingest_long(&rows2, &IngestOptions::default()).unwrap();
        assert_eq!(cohort.subjects(), cohort2.subjects());
    }

    #[test]
    fn missing_column_reported_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("long.csv");
        fs::write(&path, "ID,subset_ind,y,t\n1,0,0,1\n").unwrap();
        let cols = ColumnSpec::new(vec!["x_1_star".into()], vec![], None);
        match read_long_csv(&path, &cols) {
            Err(IoError::MissingColumn(c)) => assert_eq!(c, "x_1_star"),
            other => panic!("expected missing column, got {other:?}"),
        }
    }

    #[test]
    fn bad_outcome_value_reports_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("long.csv");
        fs::write(
            &path,
            "ID,subset_ind,x_1_star,x_1_starstar,y,t\n1,0,0.5,NA,2,1\n",
        )
        .unwrap();
        let cols = ColumnSpec::new(vec!["x_1_star".into()], vec![], None);
        match read_long_csv(&path, &cols) {
            Err(IoError::Parse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "y");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn reference_name_derivation() {
        assert_eq!(derive_reference_name("x_1_star"), "x_1_starstar");
        assert_eq!(derive_reference_name("energy"), "energy_starstar");
    }

    #[test]
    fn calibration_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calib.toml");
        let model = CalibrationModel {
            delta0: vec![0.9],
            delta1: vec![vec![0.61]],
            delta2: vec![vec![0.2, -0.1]],
            residual_covariance: vec![vec![0.05]],
            coef_covariance: vec![
                vec![4e-4, 0.0, 0.0],
                vec![0.0, 3e-4, 1e-5],
                vec![0.0, 1e-5, 2e-4],
            ],
            n_c: 500,
            p: 1,
            q: 2,
        };
        let file = CalibrationFile {
            x_star_columns: vec!["x_1_star".into()],
            z_columns: vec!["z_1".into(), "z_2".into()],
            model,
        };
        write_calibration(&path, &file).unwrap();
        let back = read_calibration(&path).unwrap();
        assert_eq!(back.model.delta1[0][0], 0.61);
        assert_eq!(back.model.n_c, 500);
        assert_eq!(back.x_star_columns, file.x_star_columns);
    }

    #[test]
    fn malformed_calibration_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calib.toml");
        fs::write(&path, "x_star_columns = [\"a\"]\n").unwrap();
        assert!(read_calibration(&path).is_err());
    }
}
