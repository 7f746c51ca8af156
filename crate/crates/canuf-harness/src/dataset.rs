//! Dataset container, CSV ingestion, and the seeded 80/10/10 split.

use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn d_x(&self) -> usize {
        self.xs.first().map_or(0, Vec::len)
    }

    pub fn d_y(&self) -> usize {
        self.ys.first().map_or(0, Vec::len)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            xs: idx.iter().map(|i| self.xs[*i].clone()).collect(),
            ys: idx.iter().map(|i| self.ys[*i].clone()).collect(),
            weights: idx.iter().map(|i| self.weights[*i]).collect(),
        }
    }

    pub fn pairs(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.xs.iter().cloned().zip(self.ys.iter().cloned()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Seeded shuffle into 80% train, 10% validation, 10% test (by floor).
pub fn split_dataset(data: &Dataset, seed: u64) -> Split {
    let n = data.len();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    Split {
        train: data.subset(&idx[..n_train]),
        val: data.subset(&idx[n_train..n_train + n_val]),
        test: data.subset(&idx[n_train + n_val..]),
    }
}

/// CSV with a header row. Columns starting with `x` are features, columns
/// starting with `y` are targets, and an optional `weight` column carries
/// importance weights (default 1).
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let mut x_cols = Vec::new();
    let mut y_cols = Vec::new();
    let mut w_col = None;
    for (k, name) in headers.iter().enumerate() {
        let name = name.trim();
        if name == "weight" || name == "w" {
            w_col = Some(k);
        } else if name.starts_with('x') {
            x_cols.push(k);
        } else if name.starts_with('y') {
            y_cols.push(k);
        } else {
            bail!(
                "{}: unrecognized column `{name}` (expected x*, y*, or weight)",
                path.display()
            );
        }
    }
    if x_cols.is_empty() || y_cols.is_empty() {
        bail!(
            "{}: need at least one feature (x*) and one target (y*) column",
            path.display()
        );
    }
    let mut data = Dataset::default();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let parse = |col: usize| -> Result<f64> {
            let cell = record.get(col).unwrap_or("");
            cell.trim().parse::<f64>().with_context(|| {
                format!(
                    "{}: non-numeric cell at row {}, column `{}`",
                    path.display(),
                    row_idx + 2,
                    headers.get(col).unwrap_or("?")
                )
            })
        };
        data.xs
            .push(x_cols.iter().map(|c| parse(*c)).collect::<Result<_>>()?);
        data.ys
            .push(y_cols.iter().map(|c| parse(*c)).collect::<Result<_>>()?);
        data.weights.push(match w_col {
            Some(c) => parse(c)?,
            None => 1.0,
        });
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(content: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("canuf-harness-dataset");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(format!("d{}.csv", content.len()));
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        path
    }

    #[test]
    fn hundred_rows_split_80_10_10() {
        let mut data = Dataset::default();
        for i in 0..100 {
            data.xs.push(vec![i as f64]);
            data.ys.push(vec![i as f64]);
            data.weights.push(1.0);
        }
        let split = split_dataset(&data, 7);
        assert_eq!(split.train.len(), 80);
        assert_eq!(split.val.len(), 10);
        assert_eq!(split.test.len(), 10);
        // Same seed, same split.
        let again = split_dataset(&data, 7);
        assert_eq!(split.train.xs, again.train.xs);
    }

    #[test]
    fn csv_roundtrip_with_weights() {
        let path = write_temp("x0,x1,y0,weight\n1,2,3,0.5\n4,5,6,2.0\n");
        let d = load_csv(&path).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.d_x(), 2);
        assert_eq!(d.d_y(), 1);
        assert_eq!(d.weights, vec![0.5, 2.0]);
    }

    #[test]
    fn missing_weight_column_defaults_to_one() {
        let path = write_temp("x0,y0\n1,2\n");
        let d = load_csv(&path).unwrap();
        assert_eq!(d.weights, vec![1.0]);
    }

    #[test]
    fn malformed_cell_reports_location() {
        let path = write_temp("x0,y0\n1,2\n3,oops\n");
        let err = load_csv(&path).unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("row 3"), "{msg}");
        assert!(msg.contains("y0"), "{msg}");
    }

    #[test]
    fn missing_target_columns_rejected() {
        let path = write_temp("x0,x1\n1,2\n");
        assert!(load_csv(&path).is_err());
    }
}
