use patterning::harness::bracket::{bracket_pipeline, retrain_sweep, BracketPipelineConfig};
use patterning::harness::induction::{induction_pipeline, InductionPipelineConfig};
use patterning::harness::RunDir;

#[test]
fn tiny_bracket_pipeline_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = BracketPipelineConfig::tiny();
    let first = bracket_pipeline(&cfg, dir.path()).unwrap();
    assert_eq!(first.base_models.len(), 2);
    assert_eq!(first.llc.len(), 6);
    let csv = std::fs::read_to_string(dir.path().join("ood_accuracy.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
    let again = bracket_pipeline(&cfg, dir.path()).unwrap();
    assert_eq!(first, again);
}

#[test]
fn run_dir_rejects_other_config() {
    let dir = tempfile::tempdir().unwrap();
    RunDir::open(dir.path(), "bracket", "a = 1").unwrap();
    assert!(RunDir::open(dir.path(), "bracket", "a = 2").is_err());
}

#[test]
fn tiny_induction_pipeline_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = InductionPipelineConfig::tiny();
    let s = induction_pipeline(&cfg, dir.path()).unwrap();
    assert_eq!(s.runs.len(), 4);
    assert_eq!(s.pca.len(), 4);
    let csv = std::fs::read_to_string(dir.path().join("pca.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "preset,pc_index,explained_variance");
    let again = induction_pipeline(&cfg, dir.path()).unwrap();
    assert_eq!(s, again);
}

#[test]
fn single_cell_sweep() {
    use patterning::bracket::{build_distribution, ood_set, Provenance};
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let ds = build_distribution(Provenance::Original, 0.002, &mut rng).unwrap();
    let ood = ood_set(&mut rng, 50);
    let cfg = BracketPipelineConfig::tiny().train;
    let r = retrain_sweep(&ds, &ood, 1, 1, &cfg, None).unwrap();
    assert_eq!(r.cells.len(), 1);
    let a = r.cells[0].accuracy.unwrap();
    assert!((0.0..=1.0).contains(&a));
    assert_eq!(r.mean, a);
}
