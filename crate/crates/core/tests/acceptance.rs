//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//! A failing criterion makes the run exit non-zero only when
//! `PATTERNING_ACCEPTANCE_STRICT` is set, so the workspace test run reports
//! red criteria without aborting.
//!
//! The bracket and induction criteria run the desk-scale pipelines. Their
//! outputs are cached under `target/acceptance` (or `$PATTERNING_ACCEPTANCE_DIR`)
//! and resumed on later runs; a cold run takes several hours on one core.

mod common;

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::{all_strings, dyck_words, gaussian_matrix, gradient_relative_error, low_rank_matrix, random_examples,
    random_tiny_config, ref_almost_equal, solver_residual};
use patterning::bracket::{classify, is_almost_equal, is_almost_nested, parse, sample_one, Category, Provenance};
use patterning::harness::bracket::{bracket_pipeline, BracketPipelineConfig, BracketSummary};
use patterning::harness::induction::{induction_pipeline, InductionPipelineConfig, InductionSummary};
use patterning::harness::{with_workers, ExperimentManifest};
use patterning::induction::MaskPreset;
use patterning::model::{Component, Transformer};
use patterning::sampler::{estimate_llc, run_sgld, AnalyticPotential, SampleLoss, SgldConfig};
use patterning::susceptibility::per_token_susceptibility;
use patterning::util;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn cache_root() -> PathBuf {
    std::env::var_os("PATTERNING_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance"))
}

/// Bracket-preset hyperparameters rescaled for a one-parameter potential:
/// γ and ε scaled up so a few thousand steps mix.
fn analytic_sgld(seed: u64) -> SgldConfig {
    let mut cfg = SgldConfig::brackets(seed);
    cfg.gamma *= 1e-3;
    cfg.epsilon = 1e-3;
    cfg.minibatch_size = 1;
    cfg
}

fn llc_calibration() -> Verdict {
    let cfg = analytic_sgld(1);
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, pot, expect) in [
        ("w^2/2", AnalyticPotential::quadratic(1), 0.5),
        ("w^4", AnalyticPotential::quartic(1), 0.25),
    ] {
        let run = run_sgld(&pot.params::<f64>(&[0.0]), &Component::All, &pot, &cfg).unwrap();
        let est = estimate_llc(&run).unwrap();
        ok &= (est.value - expect).abs() <= 0.1;
        parts.push(format!("{name}: {:.4} (expected {expect} ± 0.1)", est.value));
    }
    verdict(ok, parts.join(", "))
}

/// Simpson's rule over `[lo, hi]` with `n` (even) intervals.
fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / n as f64;
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn susceptibility_oracle() -> Verdict {
    let losses: Vec<SampleLoss> = vec![
        std::sync::Arc::new(|w: &[f64]| (2.0 * w[0] * w[0], vec![4.0 * w[0]])),
        std::sync::Arc::new(|w: &[f64]| (10.0 * w[0].powi(4), vec![40.0 * w[0].powi(3)])),
        std::sync::Arc::new(|w: &[f64]| (0.5 * (w[0] - 0.3).powi(2), vec![w[0] - 0.3])),
    ];
    let q = vec![1.0 / 3.0; 3];
    let pot = AnalyticPotential::new(1, losses, q.clone()).unwrap();
    let mut cfg = analytic_sgld(2);
    cfg.gamma = 1.0;
    cfg.epsilon = 2e-4;
    cfg.n_draws = 100_000;
    let center = [0.0];
    let run = run_sgld(&pot.params::<f64>(&center), &Component::All, &pot, &cfg).unwrap();
    let chi = per_token_susceptibility(&run).unwrap();

    // ⟨φ⟩ under q' = (1−ε)q + εδ_x by quadrature, φ = L(w) − L(w*) for the
    // unperturbed L.
    let nb = cfg.n_beta;
    let phi = |w: f64| pot.loss(&[w]) - pot.loss(&center);
    let mean_phi = |weights: &[f64]| {
        let lq = |w: f64| (0..3).map(|i| weights[i] * pot.sample_loss(i, &[w])).sum::<f64>();
        let dens = |w: f64| (-nb * lq(w) - cfg.gamma * w * w / 2.0).exp();
        let z = simpson(dens, -3.0, 3.0, 20_000);
        simpson(|w| phi(w) * dens(w), -3.0, 3.0, 20_000) / z
    };
    let h = 1e-4;
    let mut ok = true;
    let mut parts = Vec::new();
    for x in 0..3 {
        let mix = |e: f64| -> Vec<f64> { (0..3).map(|i| (1.0 - e) * q[i] + if i == x { e } else { 0.0 }).collect() };
        let deriv = (mean_phi(&mix(h)) - mean_phi(&mix(-h))) / (2.0 * h);
        let est = nb * chi[x];
        let rel = (est - deriv).abs() / deriv.abs();
        ok &= rel < 0.2;
        parts.push(format!("x{x}: nβχ {est:.4e} vs d⟨φ⟩/dε {deriv:.4e} (rel {rel:.3})"));
    }
    verdict(ok, parts.join("; "))
}

fn solver_exactness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for i in 0..120 {
        use rand::Rng;
        let rows = if i % 3 == 0 { 2 } else { rng.gen_range(1..10) };
        let cols = rng.gen_range(rows..rows + 40);
        let chi = if i % 4 == 1 && rows > 1 {
            low_rank_matrix(&mut rng, rows, cols, rows - 1)
        } else {
            gaussian_matrix(&mut rng, rows, cols)
        };
        worst = worst.max(solver_residual(&mut rng, &chi));
        n += 1;
    }
    let big = gaussian_matrix(&mut rng, 64, 256);
    worst = worst.max(solver_residual(&mut rng, &big));
    verdict(worst < 1e-10, format!("{} matrices, worst residual {worst:.2e} (tol 1e-10)", n + 1))
}

fn classifier_oracles() -> Verdict {
    let mut mismatches = 0usize;
    let mut checked = 0usize;
    for n in 0..=8 {
        let dyck: HashSet<String> = dyck_words(n).into_iter().collect();
        let shorter: HashSet<String> = if n >= 2 { dyck_words(n - 2).into_iter().collect() } else { HashSet::new() };
        for s in all_strings(n) {
            let t = parse(&s).unwrap();
            let balanced = 2 * s.chars().filter(|&c| c == '(').count() == n;
            let cat = if dyck.contains(&s) {
                Category::Nested
            } else if balanced {
                Category::EqualNotNested
            } else {
                Category::Neither
            };
            let an = n >= 2 && s.ends_with("))") && shorter.contains(&s[..n - 2]);
            if classify(&t) != cat || is_almost_nested(&t) != an || is_almost_equal(&t) != ref_almost_equal(&s) {
                mismatches += 1;
            }
            checked += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut an, mut ae) = (HashSet::new(), HashSet::new());
    for _ in 0..100_000 {
        let s = sample_one(&mut rng);
        if is_almost_nested(&s) {
            an.insert(s.clone());
        }
        if is_almost_equal(&s) {
            ae.insert(s);
        }
    }
    let within = |c: usize, target: f64| (c as f64) >= target / 2.0 && (c as f64) <= target * 2.0;
    let ok = mismatches == 0 && within(an.len(), 500.0) && within(ae.len(), 3700.0);
    verdict(
        ok,
        format!(
            "{checked} strings, {mismatches} mismatches; distinct per 100k: almost-nested {} (500), almost-equal {} (3700)",
            an.len(),
            ae.len()
        ),
    )
}

fn gradient_correctness() -> Verdict {
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let cfg = random_tiny_config(&mut rng);
        let model = Transformer::new(cfg.clone()).unwrap();
        let params = model.init_params::<f64>(seed);
        let data = random_examples(&mut rng, &cfg, 3);
        worst = worst.max(gradient_relative_error(&model, &params, &data));
    }
    verdict(worst < 1e-4, format!("10 instances, worst relative error {worst:.2e}"))
}

fn bracket_run() -> Result<BracketSummary, String> {
    let cfg = BracketPipelineConfig::desk();
    with_workers(|| bracket_pipeline(&cfg, cache_root().join("bracket")))
        .and_then(|r| r)
        .map_err(|e| e.to_string())
}

fn bracket_end_to_end(s: &BracketSummary) -> Verdict {
    let mean = |p: Provenance| s.sweeps.iter().find(|w| w.distribution == p).map(|w| (w.mean, w.accuracies()));
    let (Some((orig, o)), Some((an, a)), Some((ae, e))) =
        (mean(Provenance::Original), mean(Provenance::AlmostNested), mean(Provenance::AlmostEqual))
    else {
        return verdict(false, "missing sweep".into());
    };
    let low = a.iter().filter(|&&x| x < 0.1).count();
    let frac = low as f64 / a.len().max(1) as f64;
    let ok = an < orig && orig < ae && frac >= 0.9 && o.len() == 20 && a.len() == 20 && e.len() == 20;
    verdict(
        ok,
        format!(
            "mean OOD AlmostNested {an:.3} < Original {orig:.3} < AlmostEqual {ae:.3}; AlmostNested < 0.1 in {low}/{} models",
            a.len()
        ),
    )
}

fn llc_shift(s: &BracketSummary) -> Verdict {
    // Base models are stored in descending OOD order.
    let n = s.base_models.len();
    let third = n / 3;
    if n < 6 || third == 0 {
        return verdict(false, format!("only {n} base models"));
    }
    let get = |m: &str, d: &str| s.llc.iter().find(|(a, b, _)| a == m && b == d).map(|x| x.2);
    let shift = |idx: &[usize]| {
        let mut sum = 0.0;
        let mut var = 0.0;
        for &i in idx {
            let name = &s.base_models[i].name;
            let (an, orig) = (get(name, "almost_nested").unwrap(), get(name, "original").unwrap());
            sum += an.value - orig.value;
            var += an.std_error.powi(2) + orig.std_error.powi(2);
        }
        let k = idx.len() as f64;
        (sum / k, var / (k * k))
    };
    let top: Vec<usize> = (0..third).collect();
    let bot: Vec<usize> = (n - third..n).collect();
    let (dt, vt) = shift(&top);
    let (db, vb) = shift(&bot);
    let pooled = (vt + vb).sqrt();
    verdict(
        dt - db > 2.0 * pooled,
        format!(
            "{n} models; ΔLLC(AlmostNested − Original) top tercile {dt:.3}, bottom tercile {db:.3}, 2·pooled SE {:.3}; OOD range {:.3}..{:.3}",
            2.0 * pooled,
            s.base_models[n - 1].ood_accuracy,
            s.base_models[0].ood_accuracy
        ),
    )
}

fn induction_run() -> Result<(InductionSummary, PathBuf), String> {
    let cfg = InductionPipelineConfig::desk();
    let dir = cache_root().join("induction");
    with_workers(|| induction_pipeline(&cfg, &dir))
        .and_then(|r| r)
        .map(|s| (s, dir))
        .map_err(|e| e.to_string())
}

fn induction_modulation(s: &InductionSummary, dir: &Path) -> Verdict {
    let runs = |p: MaskPreset| s.runs.iter().filter(|r| r.preset == p.name()).collect::<Vec<_>>();
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let final_pm = |p| mean(&runs(p).iter().map(|r| r.final_max_prefix_matching()).collect::<Vec<_>>());
    let crossing = |p| {
        let steps: Vec<f64> = runs(p)
            .iter()
            .map(|r| r.first_crossing(0.3).map_or(f64::INFINITY, |s| s as f64))
            .collect();
        mean(&steps)
    };
    let (rep, base) = (final_pm(MaskPreset::Repress0x), final_pm(MaskPreset::Baseline1x));
    let (c4, c1) = (crossing(MaskPreset::Induce4x), crossing(MaskPreset::Baseline1x));
    // The explained variance is read at the component the masks were built
    // from; literal PC2 is printed alongside.
    let ev = |p: MaskPreset, k: usize| {
        s.pca
            .iter()
            .find(|r| r.preset == p.name())
            .and_then(|r| r.explained_variance.get(k).copied())
            .unwrap_or(f64::NAN)
    };
    let k = s.mask_pc - 1;
    let (ev_r, ev_b) = (ev(MaskPreset::Repress0x, k), ev(MaskPreset::Baseline1x, k));
    let (pc2_r, pc2_b) = (ev(MaskPreset::Repress0x, 1), ev(MaskPreset::Baseline1x, 1));
    let manifest: Option<ExperimentManifest> = util::read_toml(dir.join("manifest.toml")).ok();
    let replaced = manifest.map_or(0, |m| m.notes.iter().filter(|n| n.contains("replaced")).count());
    let ok = rep < base && c4 <= c1 && c1.is_finite() && ev_r < ev_b && s.seeds.len() >= 2;
    verdict(
        ok,
        format!(
            "final max prefix-matching Repress-0x {rep:.3} < Baseline-1x {base:.3}; first step ≥ 0.3 Induce-4x {c4} ≤ Baseline-1x {c1}; mask component PC{} EV Repress-0x {ev_r:.4} < Baseline-1x {ev_b:.4} (PC2: {pc2_r:.4} vs {pc2_b:.4}); seeds {:?}, {replaced} replaced",
            s.mask_pc,
            s.seeds
        ),
    )
}

/// Rerun each tiny pipeline from the config stored in its output directory
/// and compare every emitted file byte for byte.
fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let mut parts = Vec::new();
    let mut ok = true;
    let compare = |a: &Path, b: &Path| -> (bool, usize) {
        let m: ExperimentManifest = util::read_toml(a.join("manifest.toml")).unwrap();
        let mut same = true;
        for (rel, sha) in &m.outputs {
            let x = std::fs::read(a.join(rel)).unwrap();
            let y = std::fs::read(b.join(rel)).unwrap_or_default();
            same &= x == y && util::sha256_hex(&x) == *sha;
        }
        (same, m.outputs.len())
    };

    let a = tmp.path().join("bracket_a");
    let b = tmp.path().join("bracket_b");
    bracket_pipeline(&BracketPipelineConfig::tiny(), &a).unwrap();
    let cfg: BracketPipelineConfig = util::read_toml(a.join("config.toml")).unwrap();
    bracket_pipeline(&cfg, &b).unwrap();
    let (same, n) = compare(&a, &b);
    ok &= same;
    parts.push(format!("bracket {n} outputs {}", if same { "identical" } else { "differ" }));

    let a = tmp.path().join("induction_a");
    let b = tmp.path().join("induction_b");
    induction_pipeline(&InductionPipelineConfig::tiny(), &a).unwrap();
    let cfg: InductionPipelineConfig = util::read_toml(a.join("config.toml")).unwrap();
    induction_pipeline(&cfg, &b).unwrap();
    let (same, n) = compare(&a, &b);
    ok &= same;
    parts.push(format!("induction {n} outputs {}", if same { "identical" } else { "differ" }));
    verdict(ok, parts.join(", "))
}

fn main() {
    // Accept and ignore libtest flags such as `--nocapture`; a filter argument
    // selects criteria by number.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |id: usize| filters.is_empty() || filters.iter().any(|f| f == &id.to_string());

    let mut failures = 0;
    let mut record = |id: usize, name: &str, f: &mut dyn FnMut() -> Verdict| {
        if !wanted(id) {
            return;
        }
        let t = Instant::now();
        let v = f();
        if !v.pass {
            failures += 1;
        }
        println!(
            "criterion {id} [{}] {name}: {} ({:.1}s)",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            t.elapsed().as_secs_f64()
        );
    };

    record(1, "LLC calibration", &mut llc_calibration);
    record(2, "susceptibility oracle", &mut susceptibility_oracle);
    record(3, "solver exactness", &mut solver_exactness);
    record(4, "classifier and filter oracles", &mut classifier_oracles);
    record(5, "gradient correctness", &mut gradient_correctness);

    let bracket = if wanted(6) || wanted(7) { Some(bracket_run()) } else { None };
    record(6, "bracket end-to-end", &mut || match &bracket {
        Some(Ok(s)) => bracket_end_to_end(s),
        Some(Err(e)) => verdict(false, format!("pipeline failed: {e}")),
        None => unreachable!(),
    });
    record(7, "LLC shift direction", &mut || match &bracket {
        Some(Ok(s)) => llc_shift(s),
        Some(Err(e)) => verdict(false, format!("pipeline failed: {e}")),
        None => unreachable!(),
    });
    record(8, "induction modulation", &mut || match induction_run() {
        Ok((s, dir)) => induction_modulation(&s, &dir),
        Err(e) => verdict(false, format!("pipeline failed: {e}")),
    });
    record(9, "determinism", &mut determinism);

    if failures > 0 {
        println!("{failures} criteria failed");
        if std::env::var_os("PATTERNING_ACCEPTANCE_STRICT").is_some() {
            std::process::exit(1);
        }
    }
}
