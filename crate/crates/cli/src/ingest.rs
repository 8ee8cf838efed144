//! CSV loading into a regression dataset.

use std::path::{Path, PathBuf};

use qbreak::regression::{min_window_len, trim_index};
use qbreak::Dataset;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("column {0:?} not found in header")]
    MissingColumn(String),
    #[error("column {0:?} selected more than once")]
    DuplicateColumn(String),
    #[error("row {row}, column {column:?}: {value:?} is not a number")]
    NonNumericCell {
        row: usize,
        column: String,
        value: String,
    },
    #[error("{rows} usable rows, at least {min} needed for epsilon = {epsilon}")]
    TooFewRows {
        rows: usize,
        min: usize,
        epsilon: f64,
    },
    #[error(transparent)]
    Dataset(#[from] qbreak::Error),
}

impl IngestError {
    pub fn kind(&self) -> &'static str {
        match self {
            IngestError::Io { .. } => "IoError",
            IngestError::MissingColumn(_) => "MissingColumn",
            IngestError::DuplicateColumn(_) => "DuplicateColumn",
            IngestError::NonNumericCell { .. } => "NonNumericCell",
            IngestError::TooFewRows { .. } => "TooFewRows",
            IngestError::Dataset(_) => "InvalidDataset",
        }
    }
}

#[derive(Clone, Debug)]
pub struct CsvSchema {
    pub y_col: String,
    pub z_col: Option<String>,
    pub x_cols: Vec<String>,
    pub date_col: Option<String>,
    /// Pair each response with the previous row's predictors.
    pub lag_predictors: bool,
}

#[derive(Debug)]
pub struct Ingested {
    pub data: Dataset,
    /// Labels of the response rows, when a date column was given.
    pub dates: Option<Vec<String>>,
    pub x_names: Vec<String>,
}

/// Smallest sample whose trimmed grid still starts at a fittable window.
pub fn min_rows(k: usize, epsilon: f64) -> usize {
    let need = min_window_len(k);
    let mut n = need;
    while trim_index(n, epsilon) < need {
        n += 1;
    }
    n
}

pub fn ingest(path: &Path, schema: &CsvSchema) -> Result<Ingested, IngestError> {
    let io = |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(io)?;
    let header = reader.headers().map_err(io)?.clone();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
    };

    let mut selected: Vec<&str> = vec![&schema.y_col];
    selected.extend(schema.z_col.as_deref());
    selected.extend(schema.x_cols.iter().map(String::as_str));
    for (i, name) in selected.iter().enumerate() {
        if selected[..i].contains(name) {
            return Err(IngestError::DuplicateColumn(name.to_string()));
        }
    }
    let y_idx = find(&schema.y_col)?;
    let z_idx = schema.z_col.as_deref().map(find).transpose()?;
    let x_idx: Vec<usize> = schema
        .x_cols
        .iter()
        .map(|c| find(c))
        .collect::<Result<_, _>>()?;
    let date_idx = schema.date_col.as_deref().map(find).transpose()?;

    let mut y = Vec::new();
    let mut z = Vec::new();
    let mut x = Vec::new();
    let mut dates = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(io)?;
        // Header is line 1.
        let row = i + 2;
        let cell = |idx: usize| -> Result<f64, IngestError> {
            let raw = record.get(idx).unwrap_or("");
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| IngestError::NonNumericCell {
                    row,
                    column: header[idx].to_string(),
                    value: raw.to_string(),
                })
        };
        y.push(cell(y_idx)?);
        if let Some(zi) = z_idx {
            z.push(cell(zi)?);
        }
        x.push(
            x_idx
                .iter()
                .map(|&c| cell(c))
                .collect::<Result<Vec<_>, _>>()?,
        );
        if let Some(di) = date_idx {
            dates.push(record.get(di).unwrap_or("").to_string());
        }
    }

    if schema.lag_predictors && !y.is_empty() {
        y.remove(0);
        if z_idx.is_some() {
            z.remove(0);
        }
        x.pop();
        if date_idx.is_some() {
            dates.remove(0);
        }
    }
    let data = Dataset::new(y, z_idx.map(|_| z), &x)?;
    Ok(Ingested {
        data,
        dates: date_idx.map(|_| dates),
        x_names: schema.x_cols.clone(),
    })
}

/// Rejects samples too short for the trimmed break grid.
pub fn check_rows(data: &Dataset, epsilon: f64) -> Result<(), IngestError> {
    let min = min_rows(data.k(), epsilon);
    if data.n() < min {
        return Err(IngestError::TooFewRows {
            rows: data.n(),
            min,
            epsilon,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn schema(lag: bool) -> CsvSchema {
        CsvSchema {
            y_col: "ret".into(),
            z_col: None,
            x_cols: vec!["dp".into()],
            date_col: Some("date".into()),
            lag_predictors: lag,
        }
    }

    #[test]
    fn lag_drops_first_row() {
        let f = write("date,ret,dp\n2000-01,1.0,0.1\n2000-02,2.0,0.2\n2000-03,3.0,0.3\n");
        let ing = ingest(f.path(), &schema(true)).unwrap();
        assert_eq!(ing.data.n(), 2);
        assert_eq!(ing.data.y(), &[2.0, 3.0]);
        assert_eq!(ing.data.row(0), &[1.0, 0.1]);
        assert_eq!(ing.dates.unwrap(), vec!["2000-02", "2000-03"]);
    }

    #[test]
    fn pre_lagged_keeps_rows() {
        let f = write("date,ret,dp\n2000-01,1.0,0.1\n2000-02,2.0,0.2\n2000-03,3.0,0.3\n");
        let ing = ingest(f.path(), &schema(false)).unwrap();
        assert_eq!(ing.data.n(), 3);
        assert_eq!(ing.data.row(2), &[1.0, 0.3]);
    }

    #[test]
    fn reports_bad_cells_and_columns() {
        let f = write("date,ret,dp\n2000-01,1.0,NA\n");
        match ingest(f.path(), &schema(true)) {
            Err(IngestError::NonNumericCell { row, column, value }) => {
                assert_eq!((row, column.as_str(), value.as_str()), (2, "dp", "NA"));
            }
            other => panic!("{other:?}"),
        }
        let f = write("date,ret\n2000-01,1.0\n");
        assert!(matches!(
            ingest(f.path(), &schema(true)),
            Err(IngestError::MissingColumn(c)) if c == "dp"
        ));
        let mut s = schema(true);
        s.x_cols.push("ret".into());
        assert!(matches!(
            ingest(f.path(), &s),
            Err(IngestError::DuplicateColumn(_))
        ));
    }

    #[test]
    fn minimum_rows_for_trimming() {
        assert_eq!(min_rows(1, 0.1), 100);
        assert_eq!(min_rows(2, 0.1), 150);
        assert_eq!(min_rows(0, 0.2), 50);
    }
}
