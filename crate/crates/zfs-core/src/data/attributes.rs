//! Per-class attribute vectors, row-normalized to unit length.

use crate::error::{io_ingest, Result, ZfsError};
use ndarray::Array2;
use std::path::Path;

/// One unit-norm attribute row per class.
#[derive(Clone, Debug)]
pub struct AttributeMatrix {
    pub values: Array2<f32>,
}

impl AttributeMatrix {
    pub fn class_count(&self) -> usize {
        self.values.nrows()
    }

    pub fn attribute_dim(&self) -> usize {
        self.values.ncols()
    }

    /// Rows for the given classes, converted to the requested precision.
    pub fn rows_for<F: crate::element::Element>(&self, classes: &[usize]) -> Array2<F> {
        let mut out = Array2::<F>::zeros((classes.len(), self.attribute_dim()));
        for (i, &c) in classes.iter().enumerate() {
            for (j, &v) in self.values.row(c).iter().enumerate() {
                out[[i, j]] = F::lit(v as f64);
            }
        }
        out
    }
}

/// Divide each row by its Euclidean norm (accumulated in f64).
pub fn normalize_attributes(raw: &Array2<f32>) -> Result<AttributeMatrix> {
    let mut values = raw.clone();
    for (i, mut row) in values.rows_mut().into_iter().enumerate() {
        let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(ZfsError::DegenerateAttribute(format!(
                "attribute row {i} is all zeros"
            )));
        }
        row.mapv_inplace(|v| (v as f64 / norm) as f32);
    }
    Ok(AttributeMatrix { values })
}

pub(crate) fn read_attribute_file(path: &Path) -> Result<Array2<f32>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_ingest(path, e))?;
    let mut lines = text.lines();
    super::expect_format_line(lines.next(), path)?;
    let mut rows: Vec<Vec<f32>> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f32>, _> =
            line.split_whitespace().map(str::parse::<f32>).collect();
        let row = row.map_err(|e| {
            ZfsError::Schema(format!("{}:{}: {e}", path.display(), lineno + 2))
        })?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(ZfsError::Schema(format!(
                    "{}:{}: row has {} values, expected {}",
                    path.display(),
                    lineno + 2,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(ZfsError::Schema(format!(
            "{}: attribute table is empty",
            path.display()
        )));
    }
    let dim = rows[0].len();
    let flat: Vec<f32> = rows.into_iter().flatten().collect();
    let n = flat.len() / dim;
    Ok(Array2::from_shape_vec((n, dim), flat).unwrap())
}

pub fn write_attribute_file(path: &Path, values: &Array2<f32>) -> Result<()> {
    let mut out = String::from(super::FORMAT_LINE);
    out.push('\n');
    for row in values.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| io_ingest(path, e))
}
