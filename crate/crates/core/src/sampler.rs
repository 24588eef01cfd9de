//! SGLD sampling from the localized tempered posterior
//! `exp{−nβ L(w) − (γ/2)‖w − w*‖²}` and the LLC estimator.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{Component, Example, ParamVector, Segment, Transformer};
use crate::{util, Error, Result, Scalar};

const DIVERGENCE_THRESHOLD: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgldConfig {
    pub n_beta: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub n_chains: usize,
    /// Recorded draws per chain.
    pub n_draws: usize,
    /// Discarded initial steps; defaults to 10% of all steps.
    #[serde(default)]
    pub burn_in: Option<usize>,
    pub minibatch_size: usize,
    /// Record every `thin`-th step after burn-in.
    #[serde(default = "default_thin")]
    pub thin: usize,
    pub seed: u64,
}

fn default_thin() -> usize {
    1
}

impl SgldConfig {
    /// nβ = 30, γ = 300, ε = 3e-4, 4 chains × 300 draws.
    pub fn language(seed: u64) -> Self {
        SgldConfig {
            n_beta: 30.0,
            gamma: 300.0,
            epsilon: 3e-4,
            n_chains: 4,
            n_draws: 300,
            burn_in: None,
            minibatch_size: 16,
            thin: 1,
            seed,
        }
    }

    /// nβ = 100, γ = 500, ε = 3e-6, 4 chains × 5000 draws.
    pub fn brackets(seed: u64) -> Self {
        SgldConfig {
            n_beta: 100.0,
            gamma: 500.0,
            epsilon: 3e-6,
            n_chains: 4,
            n_draws: 5000,
            burn_in: None,
            minibatch_size: 128,
            thin: 1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_pos = |x: f64| x > 0.0 && x.is_finite();
        if !(finite_pos(self.n_beta) && finite_pos(self.epsilon)) || !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidArgument("n_beta and epsilon must be positive, gamma non-negative".into()));
        }
        if self.n_chains == 0 || self.n_draws == 0 || self.minibatch_size == 0 || self.thin == 0 {
            return Err(Error::InvalidArgument("chains, draws, minibatch size and thinning must be positive".into()));
        }
        Ok(())
    }

    pub fn burn_in_steps(&self) -> usize {
        self.burn_in
            .unwrap_or_else(|| ((self.n_draws * self.thin) as f64 / 9.0).round() as usize)
    }

    pub fn total_steps(&self) -> usize {
        self.burn_in_steps() + self.n_draws * self.thin
    }
}

/// Something SGLD can sample: minibatch gradients plus recorded functionals.
pub trait SgldTarget<T: Scalar>: Sync {
    /// Number of training items minibatches are drawn from.
    fn n_data(&self) -> usize;

    /// Mean loss over `batch` and its gradient, zero outside `mask`.
    fn loss_and_grad(&self, w: &ParamVector<T>, batch: &[usize], mask: &[bool]) -> Result<(T, Vec<T>)>;

    /// Reference loss `L̂(w)` and the losses of every measured sample.
    fn observe(&self, w: &ParamVector<T>) -> Result<(T, Vec<T>)>;
}

/// Functionals recorded at one draw.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorRecord<T> {
    pub chain: usize,
    pub step: usize,
    pub reference_loss: T,
    pub component_phi: T,
    pub measured_losses: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct SamplingRun<T> {
    pub config: SgldConfig,
    pub component: Component,
    pub center_loss: T,
    pub center_measured: Vec<T>,
    /// Draws of all surviving chains, in (chain, step) order.
    pub records: Vec<PosteriorRecord<T>>,
    pub diverged_chains: Vec<usize>,
}

impl<T: Scalar> SamplingRun<T> {
    pub fn n_measured(&self) -> usize {
        self.center_measured.len()
    }

    pub fn chains(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.records.iter().map(|r| r.chain).collect();
        c.dedup();
        c
    }
}

struct ChainOutput<T> {
    records: Vec<PosteriorRecord<T>>,
    diverged: bool,
}

/// Localized SGLD, `w ← w + (ε/2)(−nβ ∇L̂_mini(w) − γ(w − w*)) + N(0, ε)`,
/// on the coordinates of `component` only. Chain `c` uses stream `c` of
/// a ChaCha8 generator seeded with `cfg.seed`.
pub fn run_sgld<T: Scalar, G: SgldTarget<T>>(
    center: &ParamVector<T>,
    component: &Component,
    target: &G,
    cfg: &SgldConfig,
) -> Result<SamplingRun<T>> {
    cfg.validate()?;
    if !center.is_finite() {
        return Err(Error::InvalidArgument("center parameters are not finite".into()));
    }
    if target.n_data() == 0 {
        return Err(Error::EmptyBatch);
    }
    let mask = center.component_mask(component)?;
    let (center_loss, center_measured) = target.observe(center)?;
    let outputs: Vec<Result<ChainOutput<T>>> = (0..cfg.n_chains)
        .into_par_iter()
        .map(|chain| run_chain(center, &mask, target, cfg, center_loss, chain))
        .collect();
    let mut records = Vec::with_capacity(cfg.n_chains * cfg.n_draws);
    let mut diverged_chains = Vec::new();
    for (chain, out) in outputs.into_iter().enumerate() {
        let out = out?;
        if out.diverged {
            log::warn!("SGLD chain {chain} diverged");
            diverged_chains.push(chain);
        } else {
            records.extend(out.records);
        }
    }
    if diverged_chains.len() == cfg.n_chains {
        return Err(Error::AllChainsDiverged(cfg.n_chains));
    }
    Ok(SamplingRun {
        config: cfg.clone(),
        component: component.clone(),
        center_loss,
        center_measured,
        records,
        diverged_chains,
    })
}

fn diverges<T: Scalar>(x: T) -> bool {
    !x.is_finite() || x.f64().abs() > DIVERGENCE_THRESHOLD
}

fn run_chain<T: Scalar, G: SgldTarget<T>>(
    center: &ParamVector<T>,
    mask: &[bool],
    target: &G,
    cfg: &SgldConfig,
    center_loss: T,
    chain: usize,
) -> Result<ChainOutput<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(chain as u64);
    let active: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let half_eps = T::of(cfg.epsilon / 2.0);
    let nb = T::of(cfg.n_beta);
    let gamma = T::of(cfg.gamma);
    let noise_scale = cfg.epsilon.sqrt();
    let burn_in = cfg.burn_in_steps();
    let n_data = target.n_data();
    let all: Vec<usize> = (0..n_data).collect();
    let mut w = center.clone();
    let mut records = Vec::with_capacity(cfg.n_draws);
    let mut batch_buf = Vec::with_capacity(cfg.minibatch_size);
    for step in 0..cfg.total_steps() {
        let batch: &[usize] = if cfg.minibatch_size >= n_data {
            &all
        } else {
            batch_buf.clear();
            batch_buf.extend(index::sample(&mut rng, n_data, cfg.minibatch_size));
            &batch_buf
        };
        let (loss, grad) = target.loss_and_grad(&w, batch, mask)?;
        if diverges(loss) {
            return Ok(ChainOutput { records, diverged: true });
        }
        for &i in &active {
            let drift = -nb * grad[i] - gamma * (w.values[i] - center.values[i]);
            let z: f64 = StandardNormal.sample(&mut rng);
            w.values[i] += half_eps * drift + T::of(noise_scale * z);
        }
        if step >= burn_in && (step - burn_in + 1).is_multiple_of(cfg.thin) {
            let (reference_loss, measured_losses) = target.observe(&w)?;
            if diverges(reference_loss) || measured_losses.iter().any(|&l| !l.is_finite()) {
                return Ok(ChainOutput { records, diverged: true });
            }
            records.push(PosteriorRecord {
                chain,
                step,
                reference_loss,
                component_phi: reference_loss - center_loss,
                measured_losses,
            });
        }
    }
    Ok(ChainOutput { records, diverged: false })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LlcEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// `λ̂ = nβ (E[L̂(w)] − L̂(w*))` over all recorded draws. The standard error
/// is taken across per-chain estimates (zero with a single chain).
pub fn estimate_llc<T: Scalar>(run: &SamplingRun<T>) -> Result<LlcEstimate> {
    if run.records.is_empty() {
        return Err(Error::NotEnoughDraws { need: 1, got: 0 });
    }
    let nb = run.config.n_beta;
    let center = run.center_loss.f64();
    let mean: f64 = run.records.iter().map(|r| r.reference_loss.f64()).sum::<f64>() / run.records.len() as f64;
    let per_chain: Vec<f64> = run
        .chains()
        .into_iter()
        .map(|c| {
            let ls: Vec<f64> = run
                .records
                .iter()
                .filter(|r| r.chain == c)
                .map(|r| r.reference_loss.f64())
                .collect();
            nb * (ls.iter().sum::<f64>() / ls.len() as f64 - center)
        })
        .collect();
    let k = per_chain.len();
    let std_error = if k > 1 {
        let m = per_chain.iter().sum::<f64>() / k as f64;
        let var = per_chain.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (k - 1) as f64;
        (var / k as f64).sqrt()
    } else {
        0.0
    };
    Ok(LlcEstimate {
        value: nb * (mean - center),
        std_error,
    })
}

/// Per-sample loss of a closed-form potential: value and gradient at `w`.
pub type SampleLoss = Arc<dyn Fn(&[f64]) -> (f64, Vec<f64>) + Send + Sync>;

/// A closed-form loss `L(w) = Σ q_i ℓ_i(w)` over a handful of samples.
///
/// Gradients are always full-batch. The reference loss is `L` itself and
/// the measured losses are the individual `ℓ_i`.
#[derive(Clone)]
pub struct AnalyticPotential {
    dim: usize,
    samples: Vec<SampleLoss>,
    weights: Vec<f64>,
}

impl AnalyticPotential {
    pub fn new(dim: usize, samples: Vec<SampleLoss>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 || samples.is_empty() || samples.len() != weights.len() {
            return Err(Error::InvalidArgument("potential needs a positive dimension and one weight per sample".into()));
        }
        if weights.iter().any(|&q| !(q >= 0.0 && q.is_finite())) {
            return Err(Error::InvalidArgument("sample weights must be non-negative".into()));
        }
        Ok(AnalyticPotential { dim, samples, weights })
    }

    /// `L(w) = scale · Σ_i w_i^power`.
    pub fn power(dim: usize, power: i32, scale: f64) -> Self {
        let f: SampleLoss = Arc::new(move |w: &[f64]| {
            let v = w.iter().map(|x| scale * x.powi(power)).sum();
            let g = w.iter().map(|x| scale * power as f64 * x.powi(power - 1)).collect();
            (v, g)
        });
        AnalyticPotential::new(dim, vec![f], vec![1.0]).unwrap()
    }

    /// `L(w) = ‖w‖² / 2`.
    pub fn quadratic(dim: usize) -> Self {
        Self::power(dim, 2, 0.5)
    }

    /// `L(w) = w⁴` summed over coordinates.
    pub fn quartic(dim: usize) -> Self {
        Self::power(dim, 4, 1.0)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Same samples with data weights `q`.
    pub fn reweighted(&self, weights: Vec<f64>) -> Result<Self> {
        AnalyticPotential::new(self.dim, self.samples.clone(), weights)
    }

    pub fn sample_loss(&self, i: usize, w: &[f64]) -> f64 {
        (self.samples[i])(w).0
    }

    pub fn loss(&self, w: &[f64]) -> f64 {
        self.samples.iter().zip(&self.weights).map(|(f, q)| q * f(w).0).sum()
    }

    /// A parameter vector with a single segment `w`.
    pub fn params<T: Scalar>(&self, values: &[f64]) -> ParamVector<T> {
        assert_eq!(values.len(), self.dim);
        ParamVector::from_parts(
            values.iter().map(|&x| T::of(x)).collect(),
            vec![Segment {
                name: "w".into(),
                start: 0,
                len: self.dim,
            }],
        )
        .expect("single segment covers the vector")
    }
}

impl<T: Scalar> SgldTarget<T> for AnalyticPotential {
    fn n_data(&self) -> usize {
        1
    }

    fn loss_and_grad(&self, w: &ParamVector<T>, _batch: &[usize], mask: &[bool]) -> Result<(T, Vec<T>)> {
        let x: Vec<f64> = w.values.iter().map(|v| v.f64()).collect();
        let mut loss = 0.0;
        let mut grad = vec![0.0; self.dim];
        for (f, &q) in self.samples.iter().zip(&self.weights) {
            let (v, g) = f(&x);
            loss += q * v;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += q * b;
            }
        }
        let grad = grad
            .into_iter()
            .zip(mask)
            .map(|(g, &m)| if m { T::of(g) } else { T::zero() })
            .collect();
        Ok((T::of(loss), grad))
    }

    fn observe(&self, w: &ParamVector<T>) -> Result<(T, Vec<T>)> {
        let x: Vec<f64> = w.values.iter().map(|v| v.f64()).collect();
        let measured: Vec<f64> = self.samples.iter().map(|f| f(&x).0).collect();
        let reference = measured.iter().zip(&self.weights).map(|(l, q)| l * q).sum();
        Ok((T::of(reference), measured.into_iter().map(T::of).collect()))
    }
}

/// How the reference loss `L̂` is computed for a model target.
#[derive(Clone, Copy, Debug)]
pub enum Reference<'a> {
    /// Plain mean of the measured per-target losses.
    Measured,
    /// Weighted mean loss over a fixed evaluation batch.
    Batch(&'a [Example]),
}

/// A transformer with its training data, reference batch and measured samples.
///
/// Measured losses are unweighted per-target losses of `measured`, flattened
/// in example order.
pub struct ModelTarget<'a> {
    pub model: &'a Transformer,
    pub train: &'a [Example],
    pub reference: Reference<'a>,
    pub measured: &'a [Example],
}

impl<'a, T: Scalar> SgldTarget<T> for ModelTarget<'a> {
    fn n_data(&self) -> usize {
        self.train.len()
    }

    fn loss_and_grad(&self, w: &ParamVector<T>, batch: &[usize], mask: &[bool]) -> Result<(T, Vec<T>)> {
        let examples: Vec<Example> = batch.iter().map(|&i| self.train[i].clone()).collect();
        let (loss, grad) = self.model.loss_and_grad(w, &examples, Some(mask))?;
        Ok((loss, grad.values))
    }

    fn observe(&self, w: &ParamVector<T>) -> Result<(T, Vec<T>)> {
        let measured: Vec<T> = if self.measured.is_empty() {
            Vec::new()
        } else {
            self.model.per_target_losses(w, self.measured)?.concat()
        };
        let reference = match self.reference {
            Reference::Measured => {
                if measured.is_empty() {
                    return Err(Error::InvalidArgument("reference is the measured set, which is empty".into()));
                }
                measured.iter().copied().sum::<T>() / T::of(measured.len() as f64)
            }
            Reference::Batch(batch) => self.model.loss(w, batch)?,
        };
        Ok((reference, measured))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordManifest {
    pub config: SgldConfig,
    pub component: String,
    pub center_loss: f64,
    pub n_measured: usize,
    pub n_draws: usize,
    pub diverged_chains: Vec<usize>,
    pub sha256: String,
}

/// CSV with columns `chain, step, reference_loss, component_phi, m0, m1, …`.
pub fn records_csv<T: Scalar>(run: &SamplingRun<T>) -> String {
    let mut out = String::from("chain,step,reference_loss,component_phi");
    for j in 0..run.n_measured() {
        let _ = write!(out, ",m{j}");
    }
    out.push('\n');
    for r in &run.records {
        let _ = write!(
            out,
            "{},{},{},{}",
            r.chain,
            r.step,
            util::fmt_f64(r.reference_loss.f64()),
            util::fmt_f64(r.component_phi.f64())
        );
        for l in &r.measured_losses {
            let _ = write!(out, ",{}", util::fmt_f64(l.f64()));
        }
        out.push('\n');
    }
    out
}

/// Writes `<stem>.csv` and `<stem>.toml`.
pub fn save_records<T: Scalar>(dir: impl AsRef<Path>, stem: &str, run: &SamplingRun<T>) -> Result<()> {
    let dir = dir.as_ref();
    let csv = records_csv(run);
    let manifest = RecordManifest {
        config: run.config.clone(),
        component: run.component.label(),
        center_loss: run.center_loss.f64(),
        n_measured: run.n_measured(),
        n_draws: run.records.len(),
        diverged_chains: run.diverged_chains.clone(),
        sha256: util::sha256_hex(csv.as_bytes()),
    };
    util::write_file(dir.join(format!("{stem}.csv")), csv)?;
    util::write_toml(dir.join(format!("{stem}.toml")), &manifest)
}

/// Reads a record file back. Center measured losses are not stored and come back empty.
pub fn load_records(dir: impl AsRef<Path>, stem: &str) -> Result<SamplingRun<f64>> {
    let dir = dir.as_ref();
    let manifest: RecordManifest = util::read_toml(dir.join(format!("{stem}.toml")))?;
    let text = util::read_text(dir.join(format!("{stem}.csv")))?;
    let bad = |d: String| Error::format("record file", d);
    let mut records = Vec::with_capacity(manifest.n_draws);
    for (n, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 + manifest.n_measured {
            return Err(bad(format!("line {}: expected {} columns", n + 1, 4 + manifest.n_measured)));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("line {}: bad number {s:?}", n + 1)));
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("line {}: bad integer {s:?}", n + 1)));
        records.push(PosteriorRecord {
            chain: int(cols[0])?,
            step: int(cols[1])?,
            reference_loss: num(cols[2])?,
            component_phi: num(cols[3])?,
            measured_losses: cols[4..].iter().map(|s| num(s)).collect::<Result<_>>()?,
        });
    }
    if records.len() != manifest.n_draws {
        return Err(bad("draw count does not match manifest".into()));
    }
    Ok(SamplingRun {
        config: manifest.config,
        component: Component::parse(&manifest.component),
        center_loss: manifest.center_loss,
        center_measured: vec![0.0; manifest.n_measured],
        records,
        diverged_chains: manifest.diverged_chains,
    })
}
