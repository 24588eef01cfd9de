use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use patterning::bracket::{self, build_distribution, render, Provenance};
use patterning::harness::bracket::{bracket_pipeline, summarize_ood_csv, BracketPipelineConfig};
use patterning::harness::induction::{induction_pipeline, InductionPipelineConfig};
use patterning::harness::{mean_std, train_any, with_workers, TrainConfig};
use patterning::induction::{gen_corpus, Corpus};
use patterning::model::{load_checkpoint, save_checkpoint, Component, Example, TaskHead, Transformer};
use patterning::sampler::{estimate_llc, load_records, run_sgld, save_records, ModelTarget, Reference, SgldConfig};
use patterning::solver::{gap_select, gram_closed_form, save_plan, solve};
use patterning::susceptibility::{assemble_matrix, per_token_susceptibility, standardize_and_pca, SusceptibilityMatrix};
use patterning::util;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "patterning", version, about = "Susceptibility analysis and data reweighting for small transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a bracket dataset, an OOD set or a toy corpus.
    GenData(GenData),
    /// Train a model from a TOML training config.
    Train(TrainArgs),
    /// Run SGLD around a checkpoint and store the posterior records.
    Sample(SampleArgs),
    /// Per-token susceptibilities from stored records, one row per record set.
    Susceptibility(SusceptibilityArgs),
    /// LLC estimate from stored records.
    Llc(LlcArgs),
    /// Solve for a reweighting plan from a susceptibility matrix.
    Solve(SolveArgs),
    /// Run or resume the bracket selection pipeline.
    BracketPipeline(PipelineArgs),
    /// Run or resume the induction-head pipeline.
    InductionPipeline(PipelineArgs),
    /// Print a summary of a pipeline output directory.
    Report {
        dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    Original,
    AlmostNested,
    AlmostEqual,
    Ood,
    Corpus,
}

#[derive(Args)]
struct GenData {
    #[arg(value_enum)]
    kind: DataKind,
    #[arg(long)]
    out: PathBuf,
    /// File stem inside `out`; defaults to the kind name.
    #[arg(long)]
    name: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    size_scale: f64,
    /// Number of OOD samples or corpus documents.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    vocab_size: usize,
    #[arg(long, default_value_t = 64)]
    doc_len: usize,
    #[arg(long, default_value_t = 0.5)]
    repeat_rate: f64,
}

/// Training data reference: `bracket:DIR/NAME` or `corpus:DIR/STEM`.
#[derive(Clone)]
enum DataRef {
    Bracket(PathBuf, String),
    Corpus(PathBuf, String),
}

fn parse_data_ref(s: &str) -> Result<DataRef, String> {
    let (kind, rest) = s.split_once(':').ok_or("expected bracket:DIR/NAME or corpus:DIR/STEM")?;
    let path = Path::new(rest);
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or("missing dataset name")?
        .to_string();
    match kind {
        "bracket" => Ok(DataRef::Bracket(dir, name)),
        "corpus" => Ok(DataRef::Corpus(dir, name)),
        other => Err(format!("unknown data kind `{other}`")),
    }
}

fn load_examples(data: &DataRef, vocab_size: usize) -> Result<Vec<Example>> {
    Ok(match data {
        DataRef::Bracket(dir, name) => bracket::load_dataset(dir, name)?.0.examples(),
        DataRef::Corpus(dir, stem) => Corpus::load(dir, stem, vocab_size)?.examples(),
    })
}

#[derive(Args)]
struct TrainArgs {
    /// TOML training config.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_parser = parse_data_ref)]
    data: DataRef,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Override the config's init seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    shuffle_seed: Option<u64>,
}

#[derive(Args)]
struct SampleArgs {
    /// TOML SGLD config; defaults to the preset matching the model's task.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_parser = parse_data_ref)]
    data: DataRef,
    /// Samples whose losses are recorded at every draw.
    #[arg(long, value_parser = parse_data_ref)]
    measured: Option<DataRef>,
    /// Cap on the number of measured examples.
    #[arg(long)]
    max_measured: Option<usize>,
    /// `ALL` or a comma-separated list of parameter segments.
    #[arg(long, default_value = "ALL")]
    component: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "records")]
    stem: String,
}

#[derive(Args)]
struct SusceptibilityArgs {
    /// Record sets as `DIR/STEM`; each becomes one row labelled by its stem.
    #[arg(required = true)]
    records: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write a PCA of the rows to this TOML file.
    #[arg(long)]
    pca: Option<PathBuf>,
    #[arg(long)]
    standardize: bool,
}

#[derive(Args)]
struct LlcArgs {
    /// Record sets as `DIR/STEM`.
    #[arg(required = true)]
    records: Vec<PathBuf>,
}

#[derive(Args)]
struct SolveArgs {
    /// Susceptibility matrix CSV.
    #[arg(long)]
    chi: PathBuf,
    /// Comma-separated target shift, one entry per matrix row.
    #[arg(long, conflicts_with = "gram")]
    target: Option<String>,
    /// Two row labels `TOP,BOTTOM` for the two-observable closed form.
    #[arg(long)]
    gram: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
    #[arg(long, default_value_t = patterning::solver::DEFAULT_TOL)]
    tol: f64,
    /// Also list the `k` samples with the largest and smallest gap between the two rows.
    #[arg(long, default_value_t = 0)]
    select: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "plan")]
    stem: String,
}

#[derive(Args)]
struct PipelineArgs {
    /// TOML pipeline config; defaults to the desk-scale preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, required_unless_present = "print_config")]
    out: Option<PathBuf>,
    /// Print the effective config and exit.
    #[arg(long)]
    print_config: bool,
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    util::read_toml(path).with_context(|| format!("reading config {}", path.display()))
}

fn gen_data(a: GenData) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let kind = match a.kind {
        DataKind::Original => Provenance::Original,
        DataKind::AlmostNested => Provenance::AlmostNested,
        DataKind::AlmostEqual => Provenance::AlmostEqual,
        DataKind::Ood => {
            let set = bracket::ood_set(&mut rng, a.n);
            let text: String = set.iter().map(|s| render(&s.tokens) + "\n").collect();
            let name = a.name.unwrap_or_else(|| "ood".into());
            util::write_file(a.out.join(format!("{name}.txt")), text)?;
            println!("wrote {} OOD samples", set.len());
            return Ok(());
        }
        DataKind::Corpus => {
            let c = gen_corpus(a.vocab_size, a.n, a.doc_len, a.repeat_rate, &mut rng)?;
            c.save(&a.out, a.name.as_deref().unwrap_or("corpus"))?;
            println!("wrote {} documents, {} tokens", c.documents.len(), c.n_tokens());
            return Ok(());
        }
    };
    let ds = build_distribution(kind, a.size_scale, &mut rng)?;
    let name = a.name.unwrap_or_else(|| kind.name().to_string());
    bracket::save_dataset(&a.out, &name, &ds, a.size_scale, a.seed)?;
    let (t, f) = ds.counts();
    println!("wrote {name}: {t} true, {f} false");
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = read_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.shuffle_seed {
        cfg.shuffle_seed = s;
    }
    let data = load_examples(&a.data, cfg.model.vocab_size)?;
    let out = with_workers(|| train_any(&cfg, &data, |_, _| Ok(Vec::new())))??;
    for tp in &out.trace {
        println!("step {} loss {}", tp.step, tp.loss);
    }
    save_checkpoint(&a.out, &cfg.model, &out.params)?;
    Ok(())
}

fn sample_cmd(a: SampleArgs) -> Result<()> {
    let (mcfg, params) = load_checkpoint::<f64>(&a.checkpoint)?;
    let cfg: SgldConfig = match &a.config {
        Some(p) => read_config(p)?,
        None if mcfg.task_head == TaskHead::NextToken => SgldConfig::language(0),
        None => SgldConfig::brackets(0),
    };
    let model = Transformer::new(mcfg.clone())?;
    let train = load_examples(&a.data, mcfg.vocab_size)?;
    let mut measured = match &a.measured {
        Some(m) => load_examples(m, mcfg.vocab_size)?,
        None => Vec::new(),
    };
    if let Some(k) = a.max_measured {
        measured.truncate(k);
    }
    let reference_batch: Vec<Example> = train.iter().take(256).cloned().collect();
    let reference = if measured.is_empty() {
        Reference::Batch(&reference_batch)
    } else {
        Reference::Measured
    };
    let target = ModelTarget {
        model: &model,
        train: &train,
        reference,
        measured: &measured,
    };
    let component = Component::parse(&a.component);
    let run = with_workers(|| run_sgld(&params, &component, &target, &cfg))??;
    save_records(&a.out, &a.stem, &run)?;
    println!(
        "{} draws from {} chains ({} diverged)",
        run.records.len(),
        run.chains().len(),
        run.diverged_chains.len()
    );
    Ok(())
}

fn split_record_path(p: &Path) -> Result<(PathBuf, String)> {
    let stem = p
        .file_name()
        .and_then(|n| n.to_str())
        .context("record path needs a stem")?
        .to_string();
    Ok((p.parent().map(Path::to_path_buf).unwrap_or_default(), stem))
}

fn susceptibility_cmd(a: SusceptibilityArgs) -> Result<()> {
    let mut rows = Vec::new();
    let mut n_cols = None;
    for p in &a.records {
        let (dir, stem) = split_record_path(p)?;
        let run = load_records(&dir, &stem)?;
        let row = per_token_susceptibility(&run)?;
        if *n_cols.get_or_insert(row.len()) != row.len() {
            bail!("{} measures a different number of samples", p.display());
        }
        rows.push((stem, row));
    }
    let cols = (0..n_cols.unwrap_or(0)).map(|i| format!("s{i}")).collect();
    let chi = assemble_matrix(rows, cols)?;
    chi.save(&a.out)?;
    if let Some(path) = a.pca {
        let pca = standardize_and_pca(&chi, a.standardize)?;
        pca.save(&path)?;
        for (k, v) in pca.explained_variance.iter().enumerate() {
            println!("pc{k} {v:.4}");
        }
    }
    Ok(())
}

fn llc_cmd(a: LlcArgs) -> Result<()> {
    println!("records,value,std_error");
    for p in &a.records {
        let (dir, stem) = split_record_path(p)?;
        let est = estimate_llc(&load_records(&dir, &stem)?)?;
        println!("{stem},{},{}", util::fmt_f64(est.value), util::fmt_f64(est.std_error));
    }
    Ok(())
}

fn solve_cmd(a: SolveArgs) -> Result<()> {
    let chi = SusceptibilityMatrix::<f64>::load(&a.chi)?;
    if let Some(spec) = &a.target {
        let target: Vec<f64> = spec
            .split(',')
            .map(|s| s.trim().parse::<f64>().map(|x| x * a.epsilon))
            .collect::<Result<_, _>>()
            .context("target must be comma-separated numbers")?;
        let sol = solve(&chi, &target, a.tol)?;
        save_plan(&a.out, &a.stem, &sol.plan)?;
        println!("rank {} unreachable {}", sol.plan.rank_used, sol.plan.unreachable);
        return Ok(());
    }
    let spec = a.gram.as_deref().context("pass --target or --gram")?;
    let (top, bot) = spec.split_once(',').context("--gram takes TOP,BOTTOM")?;
    let row = |l: &str| chi.row(l).map(<[f64]>::to_vec).with_context(|| format!("no row `{l}`"));
    let (chi_top, chi_bot) = (row(top)?, row(bot)?);
    let (mut plan, gram) = gram_closed_form(&chi_top, &chi_bot, a.epsilon)?;
    plan.sample_ids = chi.col_labels.clone();
    save_plan(&a.out, &a.stem, &plan)?;
    println!("a {} b {} c {}", gram.a, gram.b, gram.c);
    if a.select > 0 {
        let sel = gap_select(&chi_top, &chi_bot, None, a.select.min(chi_top.len()))?;
        for (dir, idx) in [("maximize", &sel.maximizing), ("minimize", &sel.minimizing)] {
            for &i in idx.iter() {
                println!("{dir} {} {}", chi.col_labels[i], sel.gap[i]);
            }
        }
    }
    Ok(())
}

fn pipeline_config<T: serde::Serialize + serde::de::DeserializeOwned>(a: &PipelineArgs, desk: T) -> Result<Option<T>> {
    let cfg = match &a.config {
        Some(p) => read_config(p)?,
        None => desk,
    };
    if a.print_config {
        print!("{}", toml::to_string(&cfg)?);
        return Ok(None);
    }
    Ok(Some(cfg))
}

fn report(dir: &Path) -> Result<()> {
    let manifest: patterning::harness::ExperimentManifest = util::read_toml(dir.join("manifest.toml"))?;
    println!("pipeline {} ({} stages done)", manifest.pipeline, manifest.completed_stages.len());
    for n in &manifest.notes {
        println!("note: {n}");
    }
    let ood = dir.join("ood_accuracy.csv");
    if ood.exists() {
        println!("distribution,mean_ood_accuracy,models");
        for (d, m, n) in summarize_ood_csv(&util::read_text(&ood)?)? {
            println!("{d},{m:.4},{n}");
        }
    }
    let llc = dir.join("llc.csv");
    if llc.exists() {
        let text = util::read_text(&llc)?;
        let mut by_ds: Vec<(String, Vec<f64>)> = Vec::new();
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            let v: f64 = cols.get(2).context("short llc row")?.parse()?;
            match by_ds.iter_mut().find(|(d, _)| d == cols[1]) {
                Some((_, xs)) => xs.push(v),
                None => by_ds.push((cols[1].to_string(), vec![v])),
            }
        }
        for (d, xs) in by_ds {
            let (m, s) = mean_std(&xs);
            println!("llc {d}: mean {m:.3} sd {s:.3}");
        }
    }
    let pca = dir.join("pca.csv");
    if pca.exists() {
        let mut by_preset: Vec<(String, Vec<String>)> = Vec::new();
        for line in util::read_text(&pca)?.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            let v = cols.get(2).context("short pca row")?.to_string();
            match by_preset.iter_mut().find(|(p, _)| p == cols[0]) {
                Some((_, vs)) => vs.push(v),
                None => by_preset.push((cols[0].to_string(), vec![v])),
            }
        }
        for (p, vs) in by_preset {
            println!("explained variance {p}: {}", vs.join(" "));
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Sample(a) => sample_cmd(a),
        Command::Susceptibility(a) => susceptibility_cmd(a),
        Command::Llc(a) => llc_cmd(a),
        Command::Solve(a) => solve_cmd(a),
        Command::BracketPipeline(a) => {
            if let Some(cfg) = pipeline_config(&a, BracketPipelineConfig::desk())? {
                let out = a.out.context("--out is required")?;
                let s = with_workers(|| bracket_pipeline(&cfg, &out))??;
                for sw in &s.sweeps {
                    println!("{}: mean OOD {:.4} (sd {:.4})", sw.distribution.name(), sw.mean, sw.std);
                }
            }
            Ok(())
        }
        Command::InductionPipeline(a) => {
            if let Some(cfg) = pipeline_config(&a, InductionPipelineConfig::desk())? {
                let out = a.out.context("--out is required")?;
                let s = with_workers(|| induction_pipeline(&cfg, &out))??;
                for p in &s.pca {
                    println!("{}: explained variance {:?}", p.preset, p.explained_variance);
                }
            }
            Ok(())
        }
        Command::Report { dir } => report(&dir),
    }
}
