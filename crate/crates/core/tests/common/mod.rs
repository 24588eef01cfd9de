//! Reference implementations shared by the integration tests.
#![allow(dead_code)]

use patterning::linalg::Matrix;
use patterning::model::{Example, ModelConfig, ParamVector, TaskHead, Transformer};
use patterning::solver::{gram_closed_form, solve, ModeDecomposition};
use patterning::susceptibility::SusceptibilityMatrix;
use patterning::Precision;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// All Dyck words of length `n` from the grammar `S → ε | ( S ) S`.
pub fn dyck_words(n: usize) -> Vec<String> {
    if n == 0 {
        return vec![String::new()];
    }
    let mut out = Vec::new();
    for inner in (0..n - 1).step_by(2) {
        for a in dyck_words(inner) {
            for b in dyck_words(n - 2 - inner) {
                out.push(format!("({a}){b}"));
            }
        }
    }
    out
}

pub fn all_strings(n: usize) -> impl Iterator<Item = String> {
    (0..1u32 << n).map(move |bits| (0..n).map(|i| if bits >> i & 1 == 0 { '(' } else { ')' }).collect())
}

pub fn stack_nested(s: &str) -> bool {
    let mut depth = Vec::new();
    for c in s.chars() {
        if c == '(' {
            depth.push(c);
        } else if depth.pop().is_none() {
            return false;
        }
    }
    depth.is_empty()
}

pub fn ref_almost_equal(s: &str) -> bool {
    let mut h = 0i32;
    let (mut below, mut above) = (0, 0);
    let mut ok = true;
    for c in s.chars() {
        h += if c == '(' { 1 } else { -1 };
        match h.signum() {
            -1 => below += 1,
            1 => above += 1,
            _ => {}
        }
        ok &= below >= above;
    }
    ok && (h == 2 || h == -2)
}

pub fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix<f64> {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// A random `rows × cols` matrix of rank at most `rank`.
pub fn low_rank_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, rank: usize) -> Matrix<f64> {
    let a = gaussian_matrix(rng, rows, rank);
    let b = gaussian_matrix(rng, rank, cols);
    a.matmul(&b).unwrap()
}

pub fn labelled(m: Matrix<f64>) -> SusceptibilityMatrix<f64> {
    let rows = (0..m.rows).map(|i| format!("c{i}")).collect();
    let cols = (0..m.cols).map(|j| format!("x{j}")).collect();
    SusceptibilityMatrix::new(m, rows, cols).unwrap()
}

fn max_diff(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn vec_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest residual over the four Penrose conditions, the mode expansion,
/// simple steering along every retained mode and (for two rows) the closed
/// form.
pub fn solver_residual<R: Rng>(rng: &mut R, chi: &Matrix<f64>) -> f64 {
    let tol = patterning::solver::DEFAULT_TOL;
    let modes = ModeDecomposition::new(chi);
    let p = modes.pseudoinverse(tol);
    let cp = chi.matmul(&p).unwrap();
    let pc = p.matmul(chi).unwrap();
    let mut worst = max_diff(&cp.matmul(chi).unwrap(), chi);
    worst = worst.max(max_diff(&pc.matmul(&p).unwrap(), &p));
    worst = worst.max(max_diff(&cp.transpose(), &cp));
    worst = worst.max(max_diff(&pc.transpose(), &pc));

    let target: Vec<f64> = (0..chi.rows).map(|_| StandardNormal.sample(rng)).collect();
    let m = labelled(chi.clone());
    let sol = solve(&m, &target, tol).unwrap();
    let direct = p.matvec(&target).unwrap();
    worst = worst.max(vec_diff(&sol.plan.weights, &direct));
    let mut expansion = vec![0.0; chi.cols];
    for a in 0..modes.rank(tol) {
        let coef: f64 = modes.left[a].iter().zip(&target).map(|(u, t)| u * t).sum();
        for (e, v) in expansion.iter_mut().zip(&modes.right[a]) {
            *e += coef / modes.singular_values[a] * v;
        }
    }
    worst = worst.max(vec_diff(&sol.plan.weights, &expansion));

    for b in 0..modes.rank(tol) {
        let steer = solve(&m, &modes.left[b], tol).unwrap();
        let expected: Vec<f64> = modes.right[b].iter().map(|v| v / modes.singular_values[b]).collect();
        worst = worst.max(vec_diff(&steer.plan.weights, &expected));
    }

    if chi.rows == 2 {
        let eps = 0.7;
        if let Ok((plan, _)) = gram_closed_form(chi.row(0), chi.row(1), eps) {
            let via_pinv = p.matvec(&[-eps, eps]).unwrap();
            worst = worst.max(vec_diff(&plan.weights, &via_pinv));
        }
    }
    worst
}

/// A small random transformer configuration.
pub fn random_tiny_config<R: Rng>(rng: &mut R) -> ModelConfig {
    let next = rng.gen_bool(0.5);
    let attention_only = next && rng.gen_bool(0.5);
    ModelConfig {
        n_layers: rng.gen_range(1..=2),
        n_heads: rng.gen_range(1..=2),
        d_model: 4,
        d_head: rng.gen_range(2..=3),
        d_mlp: if attention_only { 0 } else { 6 },
        vocab_size: if next { 5 } else { 2 },
        max_seq_len: 6,
        attention_only,
        task_head: if next { TaskHead::NextToken } else { TaskHead::BinaryClassifier },
        numeric_precision: Precision::F64,
        layer_norm: rng.gen_bool(0.7),
        causal: next || rng.gen_bool(0.5),
        init_std: 0.5,
    }
}

pub fn random_examples<R: Rng>(rng: &mut R, cfg: &ModelConfig, n: usize) -> Vec<Example> {
    (0..n)
        .map(|_| {
            let len = rng.gen_range(2..=cfg.max_seq_len);
            let doc: Vec<u32> = (0..len).map(|_| rng.gen_range(0..cfg.vocab_size as u32)).collect();
            match cfg.task_head {
                TaskHead::NextToken => {
                    let w: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..2.0)).collect();
                    Example::next_token_weighted(&doc, &w)
                }
                TaskHead::BinaryClassifier => {
                    let label = rng.gen_bool(0.5);
                    Example::classify(doc[..len - 1].to_vec(), label).with_weight(rng.gen_range(0.5..1.5))
                }
            }
        })
        .collect()
}

/// Relative error between the analytic gradient and a central difference
/// computed here from the loss alone.
pub fn gradient_relative_error(model: &Transformer, params: &ParamVector<f64>, data: &[Example]) -> f64 {
    let (_, grad) = model.loss_and_grad(params, data, None).unwrap();
    let h = 1e-6;
    let mut probe = params.clone();
    let mut fd = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = probe.values[i];
        probe.values[i] = orig + h;
        let up = model.loss(&probe, data).unwrap();
        probe.values[i] = orig - h;
        let down = model.loss(&probe, data).unwrap();
        probe.values[i] = orig;
        fd.push((up - down) / (2.0 * h));
    }
    let diff: f64 = grad.values.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let na: f64 = grad.values.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}
