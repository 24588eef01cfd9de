//! Retraining sweeps and the bracket selection pipeline.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mean_std, train_any, RunDir, TrainConfig};
use crate::bracket::{
    self, build_distribution, classify, is_almost_equal, is_almost_nested, parse, render, BracketDataset,
    BracketSample, Category, Provenance,
};
use crate::model::{load_checkpoint, save_checkpoint, Component, Example, ModelConfig, ParamVector, Transformer};
use crate::sampler::{estimate_llc, run_sgld, LlcEstimate, ModelTarget, Reference, SgldConfig};
use crate::solver::{gap_select, gram_closed_form, group_mean, save_plan};
use crate::susceptibility::{assemble_matrix, per_token_susceptibility, SusceptibilityMatrix};
use crate::{util, Error, Result};

/// Train one bracket classifier, or load it from `ckpt` when present.
///
/// Training runs at the model's configured precision; the result is
/// returned in `f64`.
pub fn train_or_load(cfg: &TrainConfig, data: &[Example], ckpt: Option<&Path>) -> Result<ParamVector<f64>> {
    if let Some(path) = ckpt {
        if path.exists() {
            let (stored, params) = load_checkpoint::<f64>(path)?;
            if stored != cfg.model {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint {} has a different model config",
                    path.display()
                )));
            }
            return Ok(params);
        }
    }
    let params = train_any(cfg, data, |_, _| Ok(Vec::new()))?.params;
    if let Some(path) = ckpt {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        save_checkpoint(path, &cfg.model, &params)?;
    }
    Ok(params)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub seed: u64,
    pub shuffle: u64,
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub distribution: Provenance,
    pub cells: Vec<SweepCell>,
    pub mean: f64,
    pub std: f64,
}

impl SweepResult {
    pub fn accuracies(&self) -> Vec<f64> {
        self.cells.iter().filter_map(|c| c.accuracy).collect()
    }
}

/// Train `n_seeds × n_shuffles` models on `dataset` and report their OOD
/// accuracies. Cell `(s, h)` uses init seed `s` and shuffle seed `h`.
/// Failed cells are recorded and the sweep continues. With `cache`, each
/// cell's checkpoint is stored there and reused on later calls.
pub fn retrain_sweep(
    dataset: &BracketDataset,
    ood: &[BracketSample],
    n_seeds: u64,
    n_shuffles: u64,
    template: &TrainConfig,
    cache: Option<&Path>,
) -> Result<SweepResult> {
    if n_seeds == 0 || n_shuffles == 0 {
        return Err(Error::InvalidArgument("a sweep needs at least one seed and one shuffle".into()));
    }
    let data = dataset.examples();
    let model = Transformer::new(template.model.clone())?;
    let grid: Vec<(u64, u64)> = (0..n_seeds).flat_map(|s| (0..n_shuffles).map(move |h| (s, h))).collect();
    let cells: Vec<SweepCell> = grid
        .par_iter()
        .map(|&(seed, shuffle)| {
            let cfg = TrainConfig {
                seed,
                shuffle_seed: shuffle,
                ..template.clone()
            };
            let ckpt = cache.map(|d| d.join(format!("{}_s{seed}_h{shuffle}.ckpt", dataset.provenance.name())));
            let outcome = train_or_load(&cfg, &data, ckpt.as_deref())
                .and_then(|p| bracket::ood_accuracy(&model, &p, ood));
            match outcome {
                Ok(a) => SweepCell {
                    seed,
                    shuffle,
                    accuracy: Some(a),
                    error: None,
                },
                Err(e) => {
                    log::warn!("sweep cell ({seed}, {shuffle}) failed: {e}");
                    SweepCell {
                        seed,
                        shuffle,
                        accuracy: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    let accs: Vec<f64> = cells.iter().filter_map(|c| c.accuracy).collect();
    let (mean, std) = mean_std(&accs);
    Ok(SweepResult {
        distribution: dataset.provenance,
        cells,
        mean,
        std,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BracketPipelineConfig {
    pub size_scale: f64,
    pub data_seed: u64,
    pub ood_size: usize,
    pub ood_seed: u64,
    /// Template for every training run; seeds are overwritten per model.
    pub train: TrainConfig,
    /// Base cohort of `base_seeds × base_shuffles` models on the original data.
    pub base_seeds: u64,
    pub base_shuffles: u64,
    pub susceptibility_sgld: SgldConfig,
    pub n_measured: usize,
    pub measured_seed: u64,
    pub group_size: usize,
    pub select_k: usize,
    /// Magnitude of the target shift for the closed-form reweighting plan.
    pub gram_epsilon: f64,
    pub llc_sgld: SgldConfig,
    pub llc_reference_size: usize,
    pub sweep_seeds: u64,
    pub sweep_shuffles: u64,
}

impl BracketPipelineConfig {
    /// Desk-scale defaults: 10% data, a 9-model base cohort and 20-model sweeps.
    pub fn desk() -> Self {
        let mut susceptibility_sgld = SgldConfig::brackets(11);
        susceptibility_sgld.n_draws = 200;
        susceptibility_sgld.thin = 10;
        susceptibility_sgld.epsilon = 1e-5;
        susceptibility_sgld.minibatch_size = 32;
        let mut llc_sgld = SgldConfig::brackets(13);
        llc_sgld.n_draws = 400;
        llc_sgld.thin = 5;
        llc_sgld.epsilon = 1e-5;
        llc_sgld.minibatch_size = 32;
        BracketPipelineConfig {
            size_scale: 0.1,
            data_seed: 7,
            ood_size: 1000,
            ood_seed: 99,
            train: TrainConfig::bracket(ModelConfig::bracket_classifier(2), 5, 0, 0),
            base_seeds: 3,
            base_shuffles: 3,
            susceptibility_sgld,
            n_measured: 1024,
            measured_seed: 17,
            group_size: 3,
            select_k: 16,
            gram_epsilon: 1.0,
            llc_sgld,
            llc_reference_size: 256,
            sweep_seeds: 4,
            sweep_shuffles: 5,
        }
    }

    /// A configuration small enough for smoke tests.
    pub fn tiny() -> Self {
        let mut c = Self::desk();
        c.size_scale = 0.005;
        c.ood_size = 100;
        c.train.epochs = 1;
        c.train.model = ModelConfig::bracket_classifier(1);
        c.base_seeds = 2;
        c.base_shuffles = 1;
        c.susceptibility_sgld.n_chains = 2;
        c.susceptibility_sgld.n_draws = 20;
        c.susceptibility_sgld.thin = 1;
        c.n_measured = 32;
        c.group_size = 1;
        c.select_k = 4;
        c.llc_sgld.n_chains = 2;
        c.llc_sgld.n_draws = 20;
        c.llc_sgld.thin = 1;
        c.llc_reference_size = 32;
        c.sweep_seeds = 1;
        c.sweep_shuffles = 2;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.susceptibility_sgld.validate()?;
        self.llc_sgld.validate()?;
        if self.base_seeds * self.base_shuffles < 2 * self.group_size as u64 || self.group_size == 0 {
            return Err(Error::InvalidArgument("base cohort must hold two disjoint non-empty groups".into()));
        }
        if self.n_measured < 2 || self.ood_size == 0 || self.llc_reference_size == 0 {
            return Err(Error::InvalidArgument("measured, OOD and reference sets must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseModel {
    pub name: String,
    pub seed: u64,
    pub shuffle: u64,
    pub ood_accuracy: f64,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BracketSummary {
    pub base_models: Vec<BaseModel>,
    pub llc: Vec<(String, String, LlcEstimate)>,
    pub sweeps: Vec<SweepResult>,
    pub selected_almost_nested_fraction: f64,
    pub selected_almost_equal_fraction: f64,
}

const DATASETS: [Provenance; 3] = Provenance::ALL;

fn sweep_csv(sweeps: &[SweepResult]) -> String {
    let mut out = String::from("seed,shuffle,distribution,accuracy\n");
    for s in sweeps {
        for c in &s.cells {
            let acc = c.accuracy.map_or_else(|| "NaN".to_string(), util::fmt_f64);
            let _ = writeln!(out, "{},{},{},{}", c.seed, c.shuffle, s.distribution.name(), acc);
        }
    }
    out
}

fn llc_csv(rows: &[(String, String, LlcEstimate)]) -> String {
    let mut out = String::from("model,dataset,value,std_error\n");
    for (m, d, e) in rows {
        let _ = writeln!(out, "{m},{d},{},{}", util::fmt_f64(e.value), util::fmt_f64(e.std_error));
    }
    out
}

/// Run (or resume) the bracket pipeline in `out_dir`.
///
/// Stages: datasets, base cohort, susceptibilities, gap selection, LLC
/// verification, retraining sweeps, summary. Completed stages are read back
/// from disk.
pub fn bracket_pipeline(cfg: &BracketPipelineConfig, out_dir: impl AsRef<Path>) -> Result<BracketSummary> {
    cfg.validate()?;
    let text = toml::to_string(cfg).map_err(|e| Error::format("pipeline config", e.to_string()))?;
    let mut run = RunDir::open(out_dir, "bracket", &text)?;

    // Datasets and OOD set.
    let mut datasets = Vec::new();
    for (i, kind) in DATASETS.into_iter().enumerate() {
        let name = kind.name();
        let ds = if run.path(&format!("data/{name}.toml")).exists() {
            bracket::load_dataset(run.path("data"), name)?.0
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed);
            rng.set_stream(i as u64);
            let ds = build_distribution(kind, cfg.size_scale, &mut rng)?;
            bracket::save_dataset(run.path("data"), name, &ds, cfg.size_scale, cfg.data_seed)?;
            ds
        };
        datasets.push(ds);
    }
    let ood_path = run.path("data/ood.txt");
    let ood: Vec<BracketSample> = if ood_path.exists() {
        util::read_text(&ood_path)?
            .lines()
            .map(|l| parse(l).map(BracketSample::new))
            .collect::<Result<_>>()?
    } else {
        let ood = bracket::ood_set(&mut ChaCha8Rng::seed_from_u64(cfg.ood_seed), cfg.ood_size);
        let text: String = ood.iter().map(|s| render(&s.tokens) + "\n").collect();
        util::write_file(&ood_path, text)?;
        ood
    };
    run.complete("datasets")?;

    // Base cohort on the original distribution.
    let model = Transformer::new(cfg.train.model.clone())?;
    let original = &datasets[0];
    let original_data = original.examples();
    let expanded = original.expanded();
    let cohort: Vec<(u64, u64)> = (0..cfg.base_seeds)
        .flat_map(|s| (0..cfg.base_shuffles).map(move |h| (s, h)))
        .collect();
    let eval_subset: Vec<&BracketSample> = expanded.iter().step_by((expanded.len() / 2000).max(1)).copied().collect();
    let trained: Vec<Result<(BaseModel, ParamVector<f64>)>> = cohort
        .par_iter()
        .map(|&(s, h)| {
            let name = format!("base_s{s}_h{h}");
            let tcfg = TrainConfig {
                seed: 1000 + s,
                shuffle_seed: 1000 + h,
                ..cfg.train.clone()
            };
            let params = train_or_load(&tcfg, &original_data, Some(&run.path(&format!("models/{name}.ckpt"))))?;
            let ood_accuracy = bracket::ood_accuracy(&model, &params, &ood)?;
            let train_accuracy = bracket::accuracy(&model, &params, &eval_subset)?;
            Ok((
                BaseModel {
                    name,
                    seed: s,
                    shuffle: h,
                    ood_accuracy,
                    train_accuracy,
                },
                params,
            ))
        })
        .collect();
    let mut base: Vec<(BaseModel, ParamVector<f64>)> = trained.into_iter().collect::<Result<_>>()?;
    // Descending OOD accuracy; ties by name for a stable order.
    base.sort_by(|a, b| {
        b.0.ood_accuracy
            .partial_cmp(&a.0.ood_accuracy)
            .unwrap()
            .then_with(|| a.0.name.cmp(&b.0.name))
    });
    let mut table = String::from("model,seed,shuffle,ood_accuracy,train_accuracy\n");
    for (m, _) in &base {
        let _ = writeln!(
            table,
            "{},{},{},{},{}",
            m.name,
            m.seed,
            m.shuffle,
            util::fmt_f64(m.ood_accuracy),
            util::fmt_f64(m.train_accuracy)
        );
    }
    run.emit("base_models.csv", &table)?;
    run.complete("base_cohort")?;

    // Per-sample susceptibilities at every base model over a uniform draw
    // of training samples, which also serve as the reference batch.
    let mut mrng = ChaCha8Rng::seed_from_u64(cfg.measured_seed);
    let measured: Vec<&BracketSample> = expanded.choose_multiple(&mut mrng, cfg.n_measured.min(expanded.len())).copied().collect();
    let measured_ex: Vec<Example> = measured.iter().map(|s| s.example()).collect();
    let col_labels: Vec<String> = (0..measured.len()).map(|i| format!("s{i}")).collect();
    let chi_path = run.path("chi.csv");
    let chi = if run.done("susceptibility") && chi_path.exists() {
        SusceptibilityMatrix::<f64>::load(&chi_path)?
    } else {
        let mut rows = Vec::new();
        for (m, params) in &base {
            let row_path = run.path(&format!("chi_rows/{}.csv", m.name));
            let row = if row_path.exists() {
                SusceptibilityMatrix::<f64>::load(&row_path)?.entries.data
            } else {
                log::info!("sampling susceptibilities at {}", m.name);
                let target = ModelTarget {
                    model: &model,
                    train: &original_data,
                    reference: Reference::Measured,
                    measured: &measured_ex,
                };
                let sampled = run_sgld(params, &Component::All, &target, &cfg.susceptibility_sgld)?;
                let row = per_token_susceptibility(&sampled)?;
                assemble_matrix(vec![(m.name.clone(), row.clone())], col_labels.clone())?.save(&row_path)?;
                row
            };
            rows.push((m.name.clone(), row));
        }
        let chi = assemble_matrix(rows, col_labels.clone())?;
        run.emit("chi.csv", &chi.to_csv())?;
        let mut mtab = String::from("sample,tokens,label\n");
        for (id, s) in col_labels.iter().zip(&measured) {
            let _ = writeln!(mtab, "{id},{},{}", render(&s.tokens), s.label as u8);
        }
        run.emit("measured.csv", &mtab)?;
        run.complete("susceptibility")?;
        chi
    };

    // Gap selection between the top and bottom OOD groups.
    let g = cfg.group_size;
    let n_base = base.len();
    let chi_top = group_mean(&chi, &(0..g).collect::<Vec<_>>())?;
    let chi_bot = group_mean(&chi, &(n_base - g..n_base).collect::<Vec<_>>())?;
    let false_only: Vec<bool> = measured.iter().map(|s| !s.label).collect();
    let n_false = false_only.iter().filter(|&&f| f).count();
    let k = cfg.select_k.min(n_false);
    let sel = gap_select(&chi_top, &chi_bot, Some(&false_only), k)?;
    let mut gtab = String::from("rank,direction,sample,tokens,gap,almost_nested,almost_equal\n");
    let (mut an_hits, mut ae_hits) = (0usize, 0usize);
    for (dir, idx) in [("maximize", &sel.maximizing), ("minimize", &sel.minimizing)] {
        for (rank, &i) in idx.iter().enumerate() {
            let t = &measured[i].tokens;
            let (an, ae) = (is_almost_nested(t), is_almost_equal(t));
            if dir == "maximize" && an {
                an_hits += 1;
            }
            if dir == "minimize" && ae {
                ae_hits += 1;
            }
            let _ = writeln!(
                gtab,
                "{rank},{dir},{},{},{},{},{}",
                col_labels[i],
                render(t),
                util::fmt_f64(sel.gap[i]),
                an as u8,
                ae as u8
            );
        }
    }
    run.emit("gap_selection.csv", &gtab)?;
    match gram_closed_form(&chi_top, &chi_bot, cfg.gram_epsilon) {
        Ok((mut plan, gram)) => {
            plan.sample_ids = col_labels.clone();
            save_plan(run.path("plan"), "gram", &plan)?;
            util::write_toml(run.path("plan/gram_summary.toml"), &gram)?;
        }
        Err(e) => run.note(format!("gram closed form skipped: {e}"))?,
    }
    run.complete("gap_selection")?;

    // LLC of every base model on each distribution.
    let llc_path = run.path("llc_cells");
    let mut llc_rows = Vec::new();
    for (di, ds) in datasets.iter().enumerate() {
        let data = ds.examples();
        let mut rrng = ChaCha8Rng::seed_from_u64(cfg.llc_sgld.seed);
        rrng.set_stream(di as u64);
        let reference: Vec<Example> = data
            .choose_multiple(&mut rrng, cfg.llc_reference_size.min(data.len()))
            .cloned()
            .collect();
        for (m, params) in &base {
            let cell = llc_path.join(format!("{}_{}.toml", m.name, ds.provenance.name()));
            let est: LlcEstimate = if cell.exists() {
                util::read_toml(&cell)?
            } else {
                log::info!("estimating LLC of {} on {}", m.name, ds.provenance.name());
                let target = ModelTarget {
                    model: &model,
                    train: &data,
                    reference: Reference::Batch(&reference),
                    measured: &[],
                };
                let est = estimate_llc(&run_sgld(params, &Component::All, &target, &cfg.llc_sgld)?)?;
                util::write_toml(&cell, &est)?;
                est
            };
            llc_rows.push((m.name.clone(), ds.provenance.name().to_string(), est));
        }
    }
    run.emit("llc.csv", &llc_csv(&llc_rows))?;
    run.complete("llc")?;

    // Retraining sweeps.
    let mut sweeps = Vec::new();
    for ds in &datasets {
        sweeps.push(retrain_sweep(
            ds,
            &ood,
            cfg.sweep_seeds,
            cfg.sweep_shuffles,
            &cfg.train,
            Some(&run.path("sweep")),
        )?);
    }
    run.emit("ood_accuracy.csv", &sweep_csv(&sweeps))?;
    run.complete("sweep")?;

    let summary = BracketSummary {
        base_models: base.into_iter().map(|(m, _)| m).collect(),
        llc: llc_rows,
        sweeps,
        selected_almost_nested_fraction: an_hits as f64 / k.max(1) as f64,
        selected_almost_equal_fraction: ae_hits as f64 / k.max(1) as f64,
    };
    let text = toml::to_string(&summary).map_err(|e| Error::format("summary", e.to_string()))?;
    run.emit("summary.toml", &text)?;
    run.complete("summary")?;
    Ok(summary)
}

/// Sanity check used by callers that load a dataset from disk.
pub fn check_no_equal_not_nested(ds: &BracketDataset) -> Result<()> {
    if ds.entries.iter().any(|e| classify(&e.sample.tokens) == Category::EqualNotNested) {
        return Err(Error::InvalidArgument("dataset contains equal-count samples that are not nested".into()));
    }
    Ok(())
}

/// Used by `report`: mean accuracy per distribution from an `ood_accuracy.csv`.
pub fn summarize_ood_csv(text: &str) -> Result<Vec<(String, f64, usize)>> {
    let mut groups: Vec<(String, Vec<f64>)> = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(Error::format("ood_accuracy.csv", format!("bad line {line:?}")));
        }
        let acc: f64 = cols[3]
            .parse()
            .map_err(|_| Error::format("ood_accuracy.csv", format!("bad accuracy {:?}", cols[3])))?;
        match groups.iter_mut().find(|(d, _)| d == cols[2]) {
            Some((_, v)) => v.push(acc),
            None => groups.push((cols[2].to_string(), vec![acc])),
        }
    }
    Ok(groups
        .into_iter()
        .map(|(d, v)| {
            let finite: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
            (d, mean_std(&finite).0, finite.len())
        })
        .collect())
}
