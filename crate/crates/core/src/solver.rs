//! Inverting the linear response: mode decomposition, pseudoinverse
//! solves, the two-row closed form and susceptibility-gap selection.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::linalg::{svd, Matrix};
use crate::susceptibility::SusceptibilityMatrix;
use crate::{util, Error, Result, Scalar};

pub const DEFAULT_TOL: f64 = 1e-10;

/// `χ = Σ σ_α u_α v_αᵀ`, keeping every mode (including zero ones).
#[derive(Clone, Debug)]
pub struct ModeDecomposition<T> {
    pub singular_values: Vec<T>,
    /// Component-space directions.
    pub left: Vec<Vec<T>>,
    /// Sample-space directions.
    pub right: Vec<Vec<T>>,
}

impl<T: Scalar> ModeDecomposition<T> {
    pub fn new(chi: &Matrix<T>) -> Self {
        let d = svd(chi);
        let k = d.s.len();
        ModeDecomposition {
            singular_values: d.s,
            left: (0..k).map(|j| d.u.col(j)).collect(),
            right: (0..k).map(|j| d.v.col(j)).collect(),
        }
    }

    /// Number of modes with `σ ≥ tol·σ₁` (and `σ > 0`).
    pub fn rank(&self, tol: T) -> usize {
        let s1 = self.singular_values.first().copied().unwrap_or_else(T::zero);
        self.singular_values
            .iter()
            .take_while(|&&s| s > T::zero() && s >= tol * s1)
            .count()
    }

    /// Moore–Penrose pseudoinverse with the given relative cutoff.
    pub fn pseudoinverse(&self, tol: T) -> Matrix<T> {
        let r = self.right.first().map_or(0, Vec::len);
        let h = self.left.first().map_or(0, Vec::len);
        let mut out = Matrix::zeros(r, h);
        for a in 0..self.rank(tol) {
            let inv = T::one() / self.singular_values[a];
            for i in 0..r {
                let vi = self.right[a][i] * inv;
                for j in 0..h {
                    out[(i, j)] += vi * self.left[a][j];
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReweightPlan<T: Scalar = f64> {
    pub sample_ids: Vec<String>,
    pub weights: Vec<T>,
    pub target_echo: Vec<T>,
    pub tol: f64,
    pub rank_used: usize,
    /// The target has no component along any retained mode.
    pub unreachable: bool,
}

#[derive(Clone, Debug)]
pub struct Solution<T: Scalar> {
    pub plan: ReweightPlan<T>,
    pub modes: ModeDecomposition<T>,
}

/// Minimum-norm `dh` with `χ dh = dμ` projected onto the retained modes,
/// computed as `Σ (1/σ_α)⟨u_α, dμ⟩ v_α`.
pub fn solve<T: Scalar>(matrix: &SusceptibilityMatrix<T>, target: &[T], tol: f64) -> Result<Solution<T>> {
    let chi = &matrix.entries;
    if target.len() != chi.rows {
        return Err(Error::Shape(format!(
            "target has {} entries for {} components",
            target.len(),
            chi.rows
        )));
    }
    if !(tol >= 0.0) {
        return Err(Error::InvalidArgument("tol must be non-negative".into()));
    }
    let modes = ModeDecomposition::new(chi);
    let rank = modes.rank(T::of(tol));
    let mut weights = vec![T::zero(); chi.cols];
    let tnorm = crate::ops::dot(target, target).sqrt();
    let mut reached = false;
    for a in 0..rank {
        let coef = crate::ops::dot(&modes.left[a], target);
        if coef.abs() > T::of(tol) * tnorm {
            reached = true;
        }
        crate::ops::axpy(&mut weights, coef / modes.singular_values[a], &modes.right[a]);
    }
    let unreachable = tnorm > T::zero() && !reached;
    if unreachable {
        weights.iter_mut().for_each(|w| *w = T::zero());
    }
    Ok(Solution {
        plan: ReweightPlan {
            sample_ids: matrix.col_labels.clone(),
            weights,
            target_echo: target.to_vec(),
            tol,
            rank_used: rank,
            unreachable,
        },
        modes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramSummary {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl GramSummary {
    pub fn new<T: Scalar>(chi_n: &[T], chi_eq: &[T]) -> Self {
        GramSummary {
            a: crate::ops::dot(chi_n, chi_n).f64(),
            b: crate::ops::dot(chi_n, chi_eq).f64(),
            c: crate::ops::dot(chi_eq, chi_eq).f64(),
        }
    }
}

/// `dh = ε/(ac − b²) · ((a+b) χ^EQ − (b+c) χ^N)`, the minimum-norm solution
/// of `χ dh = (−ε, +ε)` for the two rows `χ^N`, `χ^EQ`.
pub fn gram_closed_form<T: Scalar>(chi_n: &[T], chi_eq: &[T], eps: T) -> Result<(ReweightPlan<T>, GramSummary)> {
    if chi_n.len() != chi_eq.len() {
        return Err(Error::Shape("rows of unequal length".into()));
    }
    let a = crate::ops::dot(chi_n, chi_n);
    let b = crate::ops::dot(chi_n, chi_eq);
    let c = crate::ops::dot(chi_eq, chi_eq);
    let det = a * c - b * b;
    if !(det > T::of(1e-12) * a * c) || det <= T::zero() {
        return Err(Error::Degenerate("susceptibility rows are linearly dependent".into()));
    }
    let k = eps / det;
    let weights = chi_n
        .iter()
        .zip(chi_eq)
        .map(|(&n, &e)| k * ((a + b) * e - (b + c) * n))
        .collect();
    let plan = ReweightPlan {
        sample_ids: (0..chi_n.len()).map(|i| i.to_string()).collect(),
        weights,
        target_echo: vec![-eps, eps],
        tol: 0.0,
        rank_used: 2,
        unreachable: false,
    };
    Ok((plan, GramSummary::new(chi_n, chi_eq)))
}

/// Entry-wise mean of the given matrix rows.
pub fn group_mean<T: Scalar>(matrix: &SusceptibilityMatrix<T>, rows: &[usize]) -> Result<Vec<T>> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("empty model group".into()));
    }
    let chi = &matrix.entries;
    let mut out = vec![T::zero(); chi.cols];
    for &r in rows {
        if r >= chi.rows {
            return Err(Error::InvalidArgument(format!("row {r} out of range")));
        }
        crate::ops::axpy(&mut out, T::one(), chi.row(r));
    }
    let inv = T::one() / T::of(rows.len() as f64);
    out.iter_mut().for_each(|x| *x *= inv);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GapSelection<T> {
    /// `χ^top − χ^bot` per sample.
    pub gap: Vec<T>,
    /// Sample indices with the largest gaps, largest first.
    pub maximizing: Vec<usize>,
    /// Sample indices with the smallest gaps, smallest first.
    pub minimizing: Vec<usize>,
}

/// Rank samples by `Δχ = χ^top − χ^bot`. When `keep` is given only samples
/// with `keep[i]` are eligible. Ties keep sample order.
pub fn gap_select<T: Scalar>(chi_top: &[T], chi_bot: &[T], keep: Option<&[bool]>, k: usize) -> Result<GapSelection<T>> {
    if chi_top.len() != chi_bot.len() {
        return Err(Error::Shape("rows of unequal length".into()));
    }
    if chi_top.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    if let Some(keep) = keep {
        if keep.len() != chi_top.len() {
            return Err(Error::Shape("filter length".into()));
        }
    }
    let gap: Vec<T> = chi_top.iter().zip(chi_bot).map(|(&t, &b)| t - b).collect();
    let eligible: Vec<usize> = (0..gap.len()).filter(|&i| keep.is_none_or(|f| f[i])).collect();
    if k > eligible.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds the {} eligible samples",
            eligible.len()
        )));
    }
    let mut desc = eligible.clone();
    desc.sort_by(|&i, &j| gap[j].partial_cmp(&gap[i]).unwrap());
    let mut asc = eligible;
    asc.sort_by(|&i, &j| gap[i].partial_cmp(&gap[j]).unwrap());
    desc.truncate(k);
    asc.truncate(k);
    Ok(GapSelection {
        gap,
        maximizing: desc,
        minimizing: asc,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PlanManifest {
    target: Vec<f64>,
    tol: f64,
    rank_used: usize,
    unreachable: bool,
    n_samples: usize,
}

/// Writes `<stem>.tsv` (sample id, weight) and `<stem>.toml` (manifest).
pub fn save_plan<T: Scalar>(dir: impl AsRef<Path>, stem: &str, plan: &ReweightPlan<T>) -> Result<()> {
    let dir = dir.as_ref();
    let mut text = String::from("sample_id\tweight\n");
    for (id, w) in plan.sample_ids.iter().zip(&plan.weights) {
        text.push_str(&format!("{id}\t{}\n", util::fmt_f64(w.f64())));
    }
    util::write_file(dir.join(format!("{stem}.tsv")), text)?;
    util::write_toml(
        dir.join(format!("{stem}.toml")),
        &PlanManifest {
            target: plan.target_echo.iter().map(|x| x.f64()).collect(),
            tol: plan.tol,
            rank_used: plan.rank_used,
            unreachable: plan.unreachable,
            n_samples: plan.weights.len(),
        },
    )
}

pub fn load_plan(dir: impl AsRef<Path>, stem: &str) -> Result<ReweightPlan<f64>> {
    let dir = dir.as_ref();
    let manifest: PlanManifest = util::read_toml(dir.join(format!("{stem}.toml")))?;
    let text = util::read_text(dir.join(format!("{stem}.tsv")))?;
    let mut ids = Vec::new();
    let mut weights = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let (id, w) = line
            .split_once('\t')
            .ok_or_else(|| Error::format("plan file", format!("bad line {line:?}")))?;
        ids.push(id.to_string());
        weights.push(w.parse().map_err(|_| Error::format("plan file", format!("bad weight {w:?}")))?);
    }
    if weights.len() != manifest.n_samples {
        return Err(Error::format("plan file", "sample count does not match manifest"));
    }
    Ok(ReweightPlan {
        sample_ids: ids,
        weights,
        target_echo: manifest.target,
        tol: manifest.tol,
        rank_used: manifest.rank_used,
        unreachable: manifest.unreachable,
    })
}
