//! Induction-head pipeline: per-head susceptibilities on a toy corpus, PCA,
//! token masks and retraining under each mask.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{train_any, OptimizerKind, RunDir, TracePoint, TrainConfig};
use crate::induction::{
    apply_token_mask, find_induction_pairs, gen_corpus, head_scores, make_probes, pairs_csv, Corpus, InductionPairSet,
    MaskPreset,
};
use crate::model::{load_checkpoint, save_checkpoint, Component, Example, ModelConfig, ParamVector, Transformer};
use crate::sampler::{run_sgld, ModelTarget, Reference, SgldConfig};
use crate::susceptibility::{assemble_matrix, per_token_susceptibility, standardize_and_pca, PcaResult, SusceptibilityMatrix};
use crate::{util, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InductionPipelineConfig {
    pub vocab_size: usize,
    pub n_docs: usize,
    pub doc_len: usize,
    pub repeat_rate: f64,
    pub corpus_seed: u64,
    /// Template for every training run; seeds are overwritten per run.
    pub train: TrainConfig,
    pub base_seed: u64,
    pub probe_half_len: usize,
    pub n_probes: usize,
    pub probe_seed: u64,
    pub sgld: SgldConfig,
    pub standardize: bool,
    pub presets: Vec<MaskPreset>,
    pub n_seeds: usize,
    /// Extra candidate seeds tried when a baseline run forms no induction head.
    pub max_replacements: usize,
    /// Max prefix-matching score a baseline run must reach.
    pub formation_threshold: f64,
    /// Documents measured when computing PCA of retrained models.
    pub pca_docs: usize,
    /// Principal component (1-based) whose token projections set the mask.
    /// `None` picks the component that best separates induction-pair tokens
    /// from the rest.
    #[serde(default)]
    pub mask_pc: Option<usize>,
}

impl InductionPipelineConfig {
    pub fn desk() -> Self {
        // SGD at the default rate barely leaves the unigram plateau in 3000
        // steps; AdamW forms induction heads by step ~1500 on this corpus.
        let mut train = TrainConfig::toy_lm(ModelConfig::toy_lm(64, 64), 3000, 0, 0);
        train.optimizer = OptimizerKind::Adamw;
        train.eval_every = 100;
        InductionPipelineConfig {
            vocab_size: 64,
            n_docs: 2048,
            doc_len: 64,
            repeat_rate: 0.8,
            corpus_seed: 1,
            train,
            base_seed: 0,
            probe_half_len: 25,
            n_probes: 64,
            probe_seed: 2,
            sgld: SgldConfig::language(5),
            standardize: true,
            presets: MaskPreset::ALL.to_vec(),
            n_seeds: 2,
            max_replacements: 4,
            formation_threshold: 0.3,
            pca_docs: 64,
            mask_pc: None,
        }
    }

    pub fn tiny() -> Self {
        let mut c = Self::desk();
        c.vocab_size = 16;
        c.n_docs = 8;
        c.doc_len = 12;
        c.train.model = ModelConfig::toy_lm(16, 12);
        c.train.steps = Some(20);
        c.train.eval_every = 10;
        c.probe_half_len = 5;
        c.n_probes = 4;
        c.sgld.n_chains = 2;
        c.sgld.n_draws = 20;
        c.n_seeds = 1;
        c.max_replacements = 0;
        c.formation_threshold = 0.0;
        c.pca_docs = 4;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.sgld.validate()?;
        if self.train.model.vocab_size != self.vocab_size || self.train.model.max_seq_len < self.doc_len {
            return Err(Error::InvalidArgument("model vocabulary or context does not fit the corpus".into()));
        }
        if 2 * self.probe_half_len > self.train.model.max_seq_len {
            return Err(Error::InvalidArgument("probes exceed the model context".into()));
        }
        if self.presets.is_empty() || self.n_seeds == 0 || self.pca_docs == 0 || self.pca_docs > self.n_docs {
            return Err(Error::InvalidArgument("need presets, seeds and 1..=n_docs PCA documents".into()));
        }
        let n_heads = self.train.model.n_layers * self.train.model.n_heads;
        if self.mask_pc.is_some_and(|k| k == 0 || k > n_heads) {
            return Err(Error::InvalidArgument(format!("mask_pc must be in 1..={n_heads}")));
        }
        Ok(())
    }
}

/// One training run and its head-score trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub preset: String,
    pub seed: u64,
    pub heads: Vec<String>,
    /// Per evaluation step: `(step, prefix_matching[h], previous_token[h])`.
    pub points: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

impl RunTrace {
    pub fn final_max_prefix_matching(&self) -> f64 {
        self.points
            .last()
            .map_or(f64::NAN, |p| p.1.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    }

    /// First recorded step whose max prefix-matching score reaches `threshold`.
    pub fn first_crossing(&self, threshold: f64) -> Option<usize> {
        self.points
            .iter()
            .find(|p| p.1.iter().any(|&v| v >= threshold))
            .map(|p| p.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresetPca {
    pub preset: String,
    /// Explained-variance ratios averaged over seeds.
    pub explained_variance: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InductionSummary {
    pub n_induction_pairs: usize,
    pub base_explained_variance: Vec<f64>,
    /// Component (1-based) used for the token masks.
    pub mask_pc: usize,
    /// Mean projection on that component over induction-pair tokens and over
    /// all other tokens, after orienting pairs negative.
    pub mask_mean_on_pairs: f64,
    pub mask_mean_elsewhere: f64,
    pub seeds: Vec<u64>,
    pub replaced_seeds: Vec<u64>,
    pub runs: Vec<RunTrace>,
    pub pca: Vec<PresetPca>,
}

fn token_labels(docs: &[Vec<u32>]) -> Vec<String> {
    docs.iter()
        .enumerate()
        .flat_map(|(d, doc)| (1..doc.len()).map(move |p| format!("d{d}p{p}")))
        .collect()
}

/// Train (or load) one model, recording head scores on the probes.
fn train_traced(
    cfg: &TrainConfig,
    data: &[Example],
    model: &Transformer,
    probes: &[Vec<u32>],
    preset: &str,
    run: &RunDir,
    stem: &str,
) -> Result<(ParamVector<f64>, RunTrace)> {
    let ckpt = run.path(&format!("models/{stem}.ckpt"));
    let trace_path = run.path(&format!("traces/{stem}.toml"));
    if ckpt.exists() && trace_path.exists() {
        let (_, params) = load_checkpoint::<f64>(&ckpt)?;
        return Ok((params, util::read_toml(&trace_path)?));
    }
    let heads = model.head_names();
    let out = train_any(cfg, data, |_, p| {
        let s = head_scores(model, p, probes)?;
        let mut m: Vec<(String, f64)> = s.prefix_matching.iter().map(|&v| ("pm".to_string(), v)).collect();
        m.extend(s.previous_token.iter().map(|&v| ("pt".to_string(), v)));
        Ok(m)
    })?;
    let nh = heads.len();
    let points = out
        .trace
        .iter()
        .filter(|t: &&TracePoint| t.metrics.len() == 2 * nh)
        .map(|t| {
            let v: Vec<f64> = t.metrics.iter().map(|m| m.1).collect();
            (t.step, v[..nh].to_vec(), v[nh..].to_vec())
        })
        .collect();
    let trace = RunTrace {
        preset: preset.to_string(),
        seed: cfg.seed,
        heads,
        points,
    };
    if let Some(dir) = ckpt.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_checkpoint(&ckpt, &cfg.model, &out.params)?;
    util::write_toml(&trace_path, &trace)?;
    Ok((out.params, trace))
}

/// Per-head susceptibility matrix of `params` over every token of `docs`.
/// Rows already stored under `cache_dir` are reused.
pub fn head_susceptibilities(
    model: &Transformer,
    params: &ParamVector<f64>,
    train_data: &[Example],
    docs: &[Vec<u32>],
    sgld: &SgldConfig,
    cache_dir: &Path,
) -> Result<SusceptibilityMatrix<f64>> {
    let measured: Vec<Example> = docs.iter().map(|d| Example::next_token(d)).collect();
    let labels = token_labels(docs);
    let mut rows = Vec::new();
    for head in model.head_names() {
        let path = cache_dir.join(format!("{head}.csv"));
        let row = if path.exists() {
            SusceptibilityMatrix::<f64>::load(&path)?.entries.data
        } else {
            log::info!("sampling susceptibilities of {head}");
            let target = ModelTarget {
                model,
                train: train_data,
                reference: Reference::Measured,
                measured: &measured,
            };
            let sampled = run_sgld(params, &Component::named(head.clone()), &target, sgld)?;
            let row = per_token_susceptibility(&sampled)?;
            assemble_matrix(vec![(head.clone(), row.clone())], labels.clone())?.save(&path)?;
            row
        };
        rows.push((head, row));
    }
    assemble_matrix(rows, labels)
}

fn pair_flags(docs: &[Vec<u32>], pairs: &InductionPairSet) -> Vec<bool> {
    let mut flags = Vec::new();
    for (d, doc) in docs.iter().enumerate() {
        for p in 1..doc.len() {
            flags.push(pairs.contains(d, p));
        }
    }
    flags
}

fn mean_where(proj: &[f64], flags: &[bool], want: bool) -> f64 {
    let (sum, n) = proj
        .iter()
        .zip(flags)
        .filter(|(_, &f)| f == want)
        .fold((0.0, 0usize), |(s, n), (x, _)| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Index of the component whose projections separate pair tokens from the
/// rest by the largest standardized mean difference.
fn most_aligned_component(pca: &PcaResult, flags: &[bool]) -> usize {
    let score = |proj: &[f64]| {
        let n = proj.len().max(2) as f64;
        let mean = proj.iter().sum::<f64>() / n;
        let sd = (proj.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let gap = (mean_where(proj, flags, true) - mean_where(proj, flags, false)).abs() / sd;
        if gap.is_finite() {
            gap
        } else {
            0.0
        }
    };
    let scores: Vec<f64> = pca.projections.iter().map(|p| score(p)).collect();
    (0..scores.len()).fold(0, |best, k| if scores[k] > scores[best] { k } else { best })
}

/// Flip component `k` so its mean over induction-pair tokens is negative.
/// Returns the mean projection on pair tokens and elsewhere afterwards.
fn orient_component(pca: &mut PcaResult, k: usize, flags: &[bool]) -> Result<(f64, f64)> {
    if k >= pca.projections.len() {
        return Err(Error::Degenerate(format!("PCA has no component {}", k + 1)));
    }
    if mean_where(&pca.projections[k], flags, true) > 0.0 {
        pca.projections[k].iter_mut().for_each(|x| *x = -*x);
        pca.components[k].iter_mut().for_each(|x| *x = -*x);
    }
    Ok((
        mean_where(&pca.projections[k], flags, true),
        mean_where(&pca.projections[k], flags, false),
    ))
}

fn head_scores_csv(runs: &[RunTrace]) -> String {
    let mut out = String::from("preset,seed,step,head,prefix_matching,previous_token\n");
    for r in runs {
        for (step, pm, pt) in &r.points {
            for (h, name) in r.heads.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{step},{name},{},{}",
                    r.preset,
                    r.seed,
                    util::fmt_f64(pm[h]),
                    util::fmt_f64(pt[h])
                );
            }
        }
    }
    out
}

fn pca_csv(rows: &[PresetPca]) -> String {
    let mut out = String::from("preset,pc_index,explained_variance\n");
    for r in rows {
        for (k, v) in r.explained_variance.iter().enumerate() {
            let _ = writeln!(out, "{},{k},{}", r.preset, util::fmt_f64(*v));
        }
    }
    out
}

/// Run (or resume) the induction pipeline in `out_dir`.
pub fn induction_pipeline(cfg: &InductionPipelineConfig, out_dir: impl AsRef<Path>) -> Result<InductionSummary> {
    cfg.validate()?;
    let text = toml::to_string(cfg).map_err(|e| Error::format("pipeline config", e.to_string()))?;
    let mut run = RunDir::open(out_dir, "induction", &text)?;

    let corpus = if run.path("corpus/train.txt").exists() {
        Corpus::load(run.path("corpus"), "train", cfg.vocab_size)?
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.corpus_seed);
        let c = gen_corpus(cfg.vocab_size, cfg.n_docs, cfg.doc_len, cfg.repeat_rate, &mut rng)?;
        c.save(run.path("corpus"), "train")?;
        c
    };
    let pairs = find_induction_pairs(&corpus);
    run.emit("pairs.csv", &pairs_csv(&corpus, &pairs))?;
    run.complete("corpus")?;

    let model = Transformer::new(cfg.train.model.clone())?;
    let probes = make_probes(
        &mut ChaCha8Rng::seed_from_u64(cfg.probe_seed),
        cfg.vocab_size,
        cfg.probe_half_len,
        cfg.n_probes,
    );
    let data = corpus.examples();
    let base_cfg = TrainConfig {
        seed: cfg.base_seed,
        shuffle_seed: 100 + cfg.base_seed,
        ..cfg.train.clone()
    };
    let (base_params, base_trace) = train_traced(&base_cfg, &data, &model, &probes, "base", &run, "base")?;
    run.emit("base_head_scores.csv", &head_scores_csv(std::slice::from_ref(&base_trace)))?;
    run.complete("base_model")?;

    let chi = if run.path("chi.csv").exists() && run.done("susceptibility") {
        SusceptibilityMatrix::<f64>::load(run.path("chi.csv"))?
    } else {
        let chi = head_susceptibilities(
            &model,
            &base_params,
            &data,
            &corpus.documents,
            &cfg.sgld,
            &run.path("chi_rows/base"),
        )?;
        run.emit("chi.csv", &chi.to_csv())?;
        run.complete("susceptibility")?;
        chi
    };

    let mut pca = standardize_and_pca(&chi, cfg.standardize)?;
    let flags = pair_flags(&corpus.documents, &pairs);
    let mask_k = match cfg.mask_pc {
        Some(k) => k - 1,
        None => most_aligned_component(&pca, &flags),
    };
    let (on_pairs, elsewhere) = orient_component(&mut pca, mask_k, &flags)?;
    if cfg.mask_pc.is_none() {
        run.note(format!(
            "mask component PC{}: mean projection {on_pairs:.3} on induction pairs, {elsewhere:.3} elsewhere",
            mask_k + 1
        ))?;
    }
    let text = toml::to_string(&pca).map_err(|e| Error::format("pca", e.to_string()))?;
    run.emit("pca/base.toml", &text)?;
    // Position 0 has no susceptibility and sits at projection 0.
    let mut mask_values: Vec<Vec<f64>> = Vec::with_capacity(corpus.documents.len());
    let mut it = pca.projections[mask_k].iter();
    for doc in &corpus.documents {
        let mut row = vec![0.0];
        row.extend(it.by_ref().take(doc.len() - 1));
        mask_values.push(row);
    }
    run.complete("pca")?;

    let mut masked = Vec::new();
    for &preset in &cfg.presets {
        let (a, b) = preset.weights();
        let c = apply_token_mask(&corpus, &mask_values, a, b)?;
        c.save(run.path("corpus"), preset.name())?;
        masked.push((preset, c));
    }
    run.complete("masks")?;

    // Seeds are accepted once their baseline run forms an induction head.
    let baseline = masked.iter().find(|(p, _)| *p == MaskPreset::Baseline1x);
    let mut seeds = Vec::new();
    let mut replaced = Vec::new();
    let mut runs: Vec<RunTrace> = Vec::new();
    let mut candidate = 0u64;
    while seeds.len() < cfg.n_seeds {
        if candidate as usize >= cfg.n_seeds + cfg.max_replacements {
            return Err(Error::Degenerate(format!(
                "only {} of {} seeds formed induction heads",
                seeds.len(),
                cfg.n_seeds
            )));
        }
        let seed = candidate;
        candidate += 1;
        if let Some((_, c)) = baseline {
            let tcfg = TrainConfig {
                seed,
                shuffle_seed: 100 + seed,
                ..cfg.train.clone()
            };
            let stem = format!("{}_s{seed}", MaskPreset::Baseline1x.name());
            let (_, trace) = train_traced(&tcfg, &c.examples(), &model, &probes, MaskPreset::Baseline1x.name(), &run, &stem)?;
            if trace.final_max_prefix_matching() < cfg.formation_threshold {
                run.note(format!(
                    "seed {seed} replaced: baseline max prefix-matching {:.3} below {}",
                    trace.final_max_prefix_matching(),
                    cfg.formation_threshold
                ))?;
                replaced.push(seed);
                continue;
            }
        }
        seeds.push(seed);
    }

    let mut params_by_run = Vec::new();
    for (preset, c) in &masked {
        let ex = c.examples();
        for &seed in &seeds {
            let tcfg = TrainConfig {
                seed,
                shuffle_seed: 100 + seed,
                ..cfg.train.clone()
            };
            let stem = format!("{}_s{seed}", preset.name());
            let (params, trace) = train_traced(&tcfg, &ex, &model, &probes, preset.name(), &run, &stem)?;
            runs.push(trace);
            params_by_run.push((*preset, seed, params));
        }
    }
    run.emit("head_scores.csv", &head_scores_csv(&runs))?;
    run.complete("retrain")?;

    // Explained variance of the per-head susceptibility PCA of each retrained
    // model, measured on the unweighted corpus.
    let pca_docs = &corpus.documents[..cfg.pca_docs];
    let mut pca_rows = Vec::new();
    for &preset in &cfg.presets {
        let mut acc: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for (p, seed, params) in &params_by_run {
            if *p != preset {
                continue;
            }
            let cache = run.path(&format!("chi_rows/{}_s{seed}", preset.name()));
            let chi = head_susceptibilities(&model, params, &data, pca_docs, &cfg.sgld, &cache)?;
            let ev = standardize_and_pca(&chi, cfg.standardize)?.explained_variance;
            if acc.is_empty() {
                acc = vec![0.0; ev.len()];
            }
            acc.iter_mut().zip(&ev).for_each(|(a, v)| *a += v);
            n += 1;
        }
        pca_rows.push(PresetPca {
            preset: preset.name().to_string(),
            explained_variance: acc.iter().map(|a| a / n as f64).collect(),
        });
    }
    run.emit("pca.csv", &pca_csv(&pca_rows))?;
    run.complete("retrained_pca")?;

    let summary = InductionSummary {
        n_induction_pairs: pairs.len(),
        base_explained_variance: pca.explained_variance.clone(),
        mask_pc: mask_k + 1,
        mask_mean_on_pairs: on_pairs,
        mask_mean_elsewhere: elsewhere,
        seeds,
        replaced_seeds: replaced,
        runs,
        pca: pca_rows,
    };
    let text = toml::to_string(&summary).map_err(|e| Error::format("summary", e.to_string()))?;
    run.emit("summary.toml", &text)?;
    run.complete("summary")?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pca(projections: Vec<Vec<f64>>) -> PcaResult {
        let k = projections.len();
        PcaResult {
            components: vec![vec![1.0; 2]; k],
            explained_variance: vec![1.0 / k as f64; k],
            projections,
            row_labels: vec!["a".into(), "b".into()],
            standardized: true,
        }
    }

    #[test]
    fn picks_and_orients_the_pair_aligned_component() {
        let flags = [true, true, false, false, true, false];
        let mut p = pca(vec![
            vec![0.1, -0.2, 0.2, -0.1, 0.0, 0.05],
            vec![1.0, 1.2, -0.9, -1.1, 0.8, -1.0],
        ]);
        let k = most_aligned_component(&p, &flags);
        assert_eq!(k, 1);
        let (on, off) = orient_component(&mut p, k, &flags).unwrap();
        assert!(on < 0.0 && off > 0.0);
        assert_eq!(p.components[1], vec![-1.0, -1.0]);
        assert!(orient_component(&mut p, 2, &flags).is_err());
    }

    #[test]
    fn mask_pc_is_range_checked() {
        let mut c = InductionPipelineConfig::tiny();
        c.mask_pc = Some(0);
        assert!(c.validate().is_err());
        c.mask_pc = Some(2);
        assert!(c.validate().is_ok());
        c.mask_pc = Some(c.train.model.n_layers * c.train.model.n_heads + 1);
        assert!(c.validate().is_err());
    }
}
