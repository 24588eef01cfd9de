//! Per-sample susceptibilities from posterior draws, the susceptibility
//! matrix, pattern averages and PCA.
//!
//! Susceptibilities are reported without the `1/(nβ)` prefactor:
//! `χ_x = −Cov(φ, ℓ_x − L̂)`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::linalg::{sym_eigen, Matrix};
use crate::sampler::SamplingRun;
use crate::{util, Error, Result, Scalar};

/// `χ_x = −Cov(φ, ℓ_x − L̂)` for every measured sample, with draws centered
/// per chain and the covariance pooled over chains (divisor `N − chains`).
pub fn per_token_susceptibility<T: Scalar>(run: &SamplingRun<T>) -> Result<Vec<T>> {
    let n = run.records.len();
    let chains = run.chains();
    if n < 2 || n <= chains.len() {
        return Err(Error::NotEnoughDraws {
            need: (chains.len() + 1).max(2),
            got: n,
        });
    }
    let m = run.n_measured();
    let mut acc = vec![T::zero(); m];
    let mut start = 0;
    while start < n {
        let chain = run.records[start].chain;
        let end = start + run.records[start..].iter().take_while(|r| r.chain == chain).count();
        let draws = &run.records[start..end];
        let k = T::of(draws.len() as f64);
        let phi_mean = draws.iter().map(|r| r.component_phi).sum::<T>() / k;
        let mut dev_mean = vec![T::zero(); m];
        for r in draws {
            if r.measured_losses.len() != m {
                return Err(Error::Shape("measured loss count changes between draws".into()));
            }
            for (d, &l) in dev_mean.iter_mut().zip(&r.measured_losses) {
                *d += l - r.reference_loss;
            }
        }
        dev_mean.iter_mut().for_each(|d| *d /= k);
        for r in draws {
            let dphi = r.component_phi - phi_mean;
            for ((a, &l), &dm) in acc.iter_mut().zip(&r.measured_losses).zip(&dev_mean) {
                *a += dphi * (l - r.reference_loss - dm);
            }
        }
        start = end;
    }
    let denom = T::of((n - chains.len()) as f64);
    Ok(acc.into_iter().map(|a| -a / denom).collect())
}

/// `H × r` matrix of susceptibilities with labelled rows (components or
/// models) and columns (measured samples).
#[derive(Clone, Debug, PartialEq)]
pub struct SusceptibilityMatrix<T: Scalar = f64> {
    pub entries: Matrix<T>,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
}

fn check_unique(labels: &[String], what: &str) -> Result<()> {
    let mut seen = HashSet::new();
    for l in labels {
        if !seen.insert(l) {
            return Err(Error::InvalidArgument(format!("duplicate {what} label `{l}`")));
        }
    }
    Ok(())
}

impl<T: Scalar> SusceptibilityMatrix<T> {
    pub fn new(entries: Matrix<T>, row_labels: Vec<String>, col_labels: Vec<String>) -> Result<Self> {
        if row_labels.len() != entries.rows || col_labels.len() != entries.cols {
            return Err(Error::Shape("label counts do not match the matrix".into()));
        }
        if entries.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("susceptibilities must be finite".into()));
        }
        check_unique(&row_labels, "row")?;
        check_unique(&col_labels, "column")?;
        Ok(SusceptibilityMatrix {
            entries,
            row_labels,
            col_labels,
        })
    }

    pub fn row(&self, label: &str) -> Option<&[T]> {
        self.row_labels
            .iter()
            .position(|l| l == label)
            .map(|i| self.entries.row(i))
    }

    /// CSV with a `label` header column followed by the column labels.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label");
        for c in &self.col_labels {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
        for (i, l) in self.row_labels.iter().enumerate() {
            out.push_str(l);
            for x in self.entries.row(i) {
                let _ = write!(out, ",{}", util::fmt_f64(x.f64()));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format("matrix file", "empty"))?;
        let mut cols = header.split(',');
        if cols.next() != Some("label") {
            return Err(Error::format("matrix file", "header must start with `label`"));
        }
        let col_labels: Vec<String> = cols.map(str::to_string).collect();
        let mut row_labels = Vec::new();
        let mut data = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let mut it = line.split(',');
            row_labels.push(it.next().unwrap().to_string());
            let before = data.len();
            for s in it {
                let x: f64 = s
                    .parse()
                    .map_err(|_| Error::format("matrix file", format!("bad number {s:?}")))?;
                data.push(T::of(x));
            }
            if data.len() - before != col_labels.len() {
                return Err(Error::format("matrix file", "row length differs from header"));
            }
        }
        let entries = Matrix::from_vec(row_labels.len(), col_labels.len(), data)?;
        Self::new(entries, row_labels, col_labels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        util::write_file(path, self.to_csv())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv(&util::read_text(path)?)
    }
}

/// Stack labelled rows into a matrix.
pub fn assemble_matrix<T: Scalar>(rows: Vec<(String, Vec<T>)>, col_labels: Vec<String>) -> Result<SusceptibilityMatrix<T>> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no rows".into()));
    }
    if rows.iter().any(|(_, r)| r.len() != col_labels.len()) {
        return Err(Error::Shape("row length differs from the number of columns".into()));
    }
    let (labels, data): (Vec<String>, Vec<Vec<T>>) = rows.into_iter().unzip();
    SusceptibilityMatrix::new(Matrix::from_rows(&data)?, labels, col_labels)
}

/// Mean of the selected columns: the susceptibility of a pattern.
pub fn per_pattern<T: Scalar>(matrix: &SusceptibilityMatrix<T>, pattern: &[usize]) -> Result<Vec<T>> {
    per_pattern_weighted(matrix, &pattern.iter().map(|&c| (c, 1.0)).collect::<Vec<_>>())
}

/// Weighted mean of columns, weights normalized to sum to one.
pub fn per_pattern_weighted<T: Scalar>(matrix: &SusceptibilityMatrix<T>, pattern: &[(usize, f64)]) -> Result<Vec<T>> {
    if pattern.is_empty() {
        return Err(Error::InvalidArgument("empty pattern".into()));
    }
    let total: f64 = pattern.iter().map(|p| p.1).sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("pattern weights must have a positive sum".into()));
    }
    let chi = &matrix.entries;
    let mut out = vec![T::zero(); chi.rows];
    for &(c, q) in pattern {
        if c >= chi.cols {
            return Err(Error::InvalidArgument(format!("column {c} out of range")));
        }
        let q = T::of(q / total);
        for (i, o) in out.iter_mut().enumerate() {
            *o += q * chi[(i, c)];
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    /// Unit directions in component (row) space, by descending variance.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    /// `projections[k][j]`: coordinate of sample `j` along component `k`.
    pub projections: Vec<Vec<f64>>,
    pub row_labels: Vec<String>,
    pub standardized: bool,
}

impl PcaResult {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        util::write_toml(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        util::read_toml(path)
    }
}

/// PCA of the sample vectors (columns of χ), optionally after z-scoring each
/// row across samples. Rows with zero variance are left at zero.
pub fn standardize_and_pca<T: Scalar>(matrix: &SusceptibilityMatrix<T>, standardize: bool) -> Result<PcaResult> {
    let chi = &matrix.entries;
    let (h, r) = (chi.rows, chi.cols);
    if r < 2 {
        return Err(Error::Degenerate("PCA needs at least two samples".into()));
    }
    let mut x = Matrix::<f64>::zeros(h, r);
    for i in 0..h {
        let row: Vec<f64> = chi.row(i).iter().map(|v| v.f64()).collect();
        let mean = row.iter().sum::<f64>() / r as f64;
        let sd = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1) as f64).sqrt();
        for j in 0..r {
            x[(i, j)] = if !standardize {
                row[j] - mean
            } else if sd > 0.0 {
                (row[j] - mean) / sd
            } else {
                0.0
            };
        }
    }
    let mut cov = x.matmul(&x.transpose())?;
    cov.data.iter_mut().for_each(|c| *c /= (r - 1) as f64);
    let (vals, vecs) = sym_eigen(&cov)?;
    let vals: Vec<f64> = vals.into_iter().map(|v| v.max(0.0)).collect();
    let total: f64 = vals.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("all samples are identical".into()));
    }
    let components: Vec<Vec<f64>> = (0..h).map(|k| vecs.col(k)).collect();
    let projections = components
        .iter()
        .map(|c| (0..r).map(|j| (0..h).map(|i| c[i] * x[(i, j)]).sum()).collect())
        .collect();
    Ok(PcaResult {
        components,
        explained_variance: vals.iter().map(|v| v / total).collect(),
        projections,
        row_labels: matrix.row_labels.clone(),
        standardized: standardize,
    })
}
