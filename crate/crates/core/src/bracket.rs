//! Parenthesis-balancing task: classification, uniform sampling, the
//! "almost nested" / "almost equal" filters and training distributions.
//!
//! Tokens are `0 = '('` and `1 = ')'`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{Example, ParamVector, TaskHead, Transformer};
use crate::{util, Error, Result, Scalar};

pub const OPEN: u32 = 0;
pub const CLOSE: u32 = 1;
pub const MAX_LEN: usize = 40;

const ORIGINAL_PER_CLASS: f64 = 100_000.0;
const ALMOST_NESTED_REMOVED: f64 = 36_600.0;
const ALMOST_NESTED_GENERATED: f64 = 18_300.0;
const ALMOST_NESTED_COPIES: usize = 2;
const ALMOST_EQUAL_REMOVED: f64 = 67_100.0;
const ALMOST_EQUAL_GENERATED: f64 = 19_000.0;
const ALMOST_EQUAL_COPIES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    Nested,
    EqualNotNested,
    Neither,
}

/// Height profile of a bracket string: `heights[0] = 0`, `(` steps up, `)` steps down.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DyckPath {
    pub heights: Vec<i32>,
}

impl DyckPath {
    pub fn new(tokens: &[u32]) -> Self {
        let mut heights = Vec::with_capacity(tokens.len() + 1);
        let mut h = 0i32;
        heights.push(h);
        for &t in tokens {
            h += if t == OPEN { 1 } else { -1 };
            heights.push(h);
        }
        DyckPath { heights }
    }

    pub fn final_height(&self) -> i32 {
        *self.heights.last().unwrap()
    }
}

pub fn parse(s: &str) -> Result<Vec<u32>> {
    s.chars()
        .map(|c| match c {
            '(' => Ok(OPEN),
            ')' => Ok(CLOSE),
            other => Err(Error::format("bracket string", format!("unexpected character {other:?}"))),
        })
        .collect()
}

pub fn render(tokens: &[u32]) -> String {
    tokens.iter().map(|&t| if t == OPEN { '(' } else { ')' }).collect()
}

pub fn classify(tokens: &[u32]) -> Category {
    let path = DyckPath::new(tokens);
    if path.final_height() != 0 {
        Category::Neither
    } else if path.heights.iter().all(|&h| h >= 0) {
        Category::Nested
    } else {
        Category::EqualNotNested
    }
}

/// Last two tokens are `)` and the rest is correctly nested (the empty prefix counts).
pub fn is_almost_nested(tokens: &[u32]) -> bool {
    let n = tokens.len();
    n >= 2 && tokens[n - 2] == CLOSE && tokens[n - 1] == CLOSE && classify(&tokens[..n - 2]) == Category::Nested
}

/// Final height is ±2 and, after every step, at least as many steps have
/// ended strictly below the axis as strictly above it.
pub fn is_almost_equal(tokens: &[u32]) -> bool {
    let path = DyckPath::new(tokens);
    if path.final_height().abs() != 2 {
        return false;
    }
    let (mut below, mut above) = (0usize, 0usize);
    for &h in &path.heights[1..] {
        if h < 0 {
            below += 1;
        } else if h > 0 {
            above += 1;
        }
        if below < above {
            return false;
        }
    }
    true
}

/// Uniform even length in `[2, 40]`, then fair i.i.d. tokens.
pub fn sample_one<R: Rng + ?Sized>(rng: &mut R) -> Vec<u32> {
    let len = 2 * rng.gen_range(1..=MAX_LEN / 2);
    (0..len).map(|_| rng.gen_range(0..2u32)).collect()
}

pub fn sample_uniform<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<Vec<u32>> {
    (0..n).map(|_| sample_one(rng)).collect()
}

/// A uniformly random correctly nested word of even length `len`.
pub fn sample_nested<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<u32> {
    let mut word: Vec<u32> = (0..len).map(|i| if i < len / 2 { OPEN } else { CLOSE }).collect();
    loop {
        word.shuffle(rng);
        if classify(&word) == Category::Nested {
            return word;
        }
    }
}

/// A uniformly random balanced-but-not-nested word of even length `len >= 2`.
pub fn sample_equal_not_nested<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<u32> {
    let mut word: Vec<u32> = (0..len).map(|i| if i < len / 2 { OPEN } else { CLOSE }).collect();
    loop {
        word.shuffle(rng);
        if classify(&word) == Category::EqualNotNested {
            return word;
        }
    }
}

/// Uniform sample conditioned on falling in the `Neither` category.
pub fn sample_neither<R: Rng + ?Sized>(rng: &mut R) -> Vec<u32> {
    loop {
        let s = sample_one(rng);
        if classify(&s) == Category::Neither {
            return s;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BracketSample {
    pub tokens: Vec<u32>,
    pub category: Category,
    pub label: bool,
}

impl BracketSample {
    pub fn new(tokens: Vec<u32>) -> Self {
        let category = classify(&tokens);
        BracketSample {
            tokens,
            category,
            label: category == Category::Nested,
        }
    }

    pub fn example(&self) -> Example {
        Example::classify(self.tokens.clone(), self.label)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    Original,
    AlmostNested,
    AlmostEqual,
}

impl Provenance {
    pub const ALL: [Provenance; 3] = [Provenance::Original, Provenance::AlmostNested, Provenance::AlmostEqual];

    pub fn name(self) -> &'static str {
        match self {
            Provenance::Original => "original",
            Provenance::AlmostNested => "almost_nested",
            Provenance::AlmostEqual => "almost_equal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "original" => Ok(Provenance::Original),
            "almost_nested" | "almostnested" => Ok(Provenance::AlmostNested),
            "almost_equal" | "almostequal" => Ok(Provenance::AlmostEqual),
            other => Err(Error::InvalidArgument(format!("unknown distribution `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry {
    pub sample: BracketSample,
    pub multiplicity: usize,
}

/// A multiset of bracket samples.
#[derive(Clone, Debug, PartialEq)]
pub struct BracketDataset {
    pub entries: Vec<DatasetEntry>,
    pub provenance: Provenance,
}

impl BracketDataset {
    /// `(n_true, n_false)` counting multiplicity.
    pub fn counts(&self) -> (usize, usize) {
        self.entries.iter().fold((0, 0), |(t, f), e| {
            if e.sample.label {
                (t + e.multiplicity, f)
            } else {
                (t, f + e.multiplicity)
            }
        })
    }

    pub fn total(&self) -> usize {
        self.entries.iter().map(|e| e.multiplicity).sum()
    }

    /// Every copy as a separate sample, in entry order.
    pub fn expanded(&self) -> Vec<&BracketSample> {
        self.entries
            .iter()
            .flat_map(|e| std::iter::repeat_n(&e.sample, e.multiplicity))
            .collect()
    }

    pub fn examples(&self) -> Vec<Example> {
        self.expanded().into_iter().map(BracketSample::example).collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(out, "{}\t{}\t{}", render(&e.sample.tokens), e.sample.label as u8, e.multiplicity);
        }
        out
    }

    pub fn from_tsv(text: &str, provenance: Provenance) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |d: &str| Error::format("dataset file", format!("line {}: {d}", lineno + 1));
            let mut cols = line.split('\t');
            let tokens = parse(cols.next().ok_or_else(|| bad("missing tokens"))?)?;
            let label = match cols.next().ok_or_else(|| bad("missing label"))? {
                "1" => true,
                "0" => false,
                _ => return Err(bad("label must be 0 or 1")),
            };
            let multiplicity: usize = cols
                .next()
                .ok_or_else(|| bad("missing multiplicity"))?
                .parse()
                .map_err(|_| bad("bad multiplicity"))?;
            if multiplicity == 0 {
                return Err(bad("multiplicity must be at least 1"));
            }
            let sample = BracketSample::new(tokens);
            if sample.label != label {
                return Err(bad("label inconsistent with tokens"));
            }
            entries.push(DatasetEntry { sample, multiplicity });
        }
        Ok(BracketDataset { entries, provenance })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub provenance: Provenance,
    pub size_scale: f64,
    pub seed: u64,
    pub n_true: usize,
    pub n_false: usize,
    pub n_entries: usize,
    pub sha256: String,
}

pub fn save_dataset(dir: impl AsRef<Path>, name: &str, ds: &BracketDataset, size_scale: f64, seed: u64) -> Result<()> {
    let dir = dir.as_ref();
    let tsv = ds.to_tsv();
    let (n_true, n_false) = ds.counts();
    let manifest = DatasetManifest {
        provenance: ds.provenance,
        size_scale,
        seed,
        n_true,
        n_false,
        n_entries: ds.entries.len(),
        sha256: util::sha256_hex(tsv.as_bytes()),
    };
    util::write_file(dir.join(format!("{name}.tsv")), tsv)?;
    util::write_toml(dir.join(format!("{name}.toml")), &manifest)
}

pub fn load_dataset(dir: impl AsRef<Path>, name: &str) -> Result<(BracketDataset, DatasetManifest)> {
    let dir = dir.as_ref();
    let manifest: DatasetManifest = util::read_toml(dir.join(format!("{name}.toml")))?;
    let tsv = util::read_text(dir.join(format!("{name}.tsv")))?;
    if util::sha256_hex(tsv.as_bytes()) != manifest.sha256 {
        return Err(Error::format("dataset file", "hash does not match manifest"));
    }
    Ok((BracketDataset::from_tsv(&tsv, manifest.provenance)?, manifest))
}

/// Distinct uniform samples passing `filter`, generated until `count` are found.
pub fn generate_special<R: Rng + ?Sized>(rng: &mut R, count: usize, filter: fn(&[u32]) -> bool) -> Vec<Vec<u32>> {
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let s = sample_one(rng);
        if filter(&s) && seen.insert(s.clone()) {
            out.push(s);
        }
    }
    out
}

fn scaled(scale: f64, base: f64) -> usize {
    (scale * base).round() as usize
}

/// Training distribution of kind `kind` at `size_scale` times the full size.
///
/// `Original` has `⌈size_scale·100k⌉` nested (True) samples, each a uniformly
/// random nested word of uniform even length, and as many `Neither` (False)
/// samples drawn uniformly. The two modified kinds remove random False
/// samples and add copies of distinct generated special samples.
pub fn build_distribution<R: Rng + ?Sized>(kind: Provenance, size_scale: f64, rng: &mut R) -> Result<BracketDataset> {
    if !(size_scale > 0.0 && size_scale <= 1.0) {
        return Err(Error::InvalidArgument("size_scale must be in (0, 1]".into()));
    }
    let per_class = (size_scale * ORIGINAL_PER_CLASS).ceil() as usize;
    let mut trues = Vec::with_capacity(per_class);
    for _ in 0..per_class {
        let len = 2 * rng.gen_range(1..=MAX_LEN / 2);
        trues.push(sample_nested(rng, len));
    }
    let mut falses: Vec<Vec<u32>> = (0..per_class).map(|_| sample_neither(rng)).collect();

    let (removed, generated, copies, filter): (usize, usize, usize, fn(&[u32]) -> bool) = match kind {
        Provenance::Original => (0, 0, 0, is_almost_nested),
        Provenance::AlmostNested => (
            scaled(size_scale, ALMOST_NESTED_REMOVED),
            scaled(size_scale, ALMOST_NESTED_GENERATED),
            ALMOST_NESTED_COPIES,
            is_almost_nested,
        ),
        Provenance::AlmostEqual => (
            scaled(size_scale, ALMOST_EQUAL_REMOVED),
            scaled(size_scale, ALMOST_EQUAL_GENERATED),
            ALMOST_EQUAL_COPIES,
            is_almost_equal,
        ),
    };
    if removed > falses.len() {
        return Err(Error::RemovalExceedsAvailable {
            requested: removed,
            available: falses.len(),
        });
    }
    if removed > 0 {
        let mut idx: Vec<usize> = (0..falses.len()).collect();
        idx.shuffle(rng);
        let drop: HashSet<usize> = idx[..removed].iter().copied().collect();
        falses = falses
            .into_iter()
            .enumerate()
            .filter(|(i, _)| !drop.contains(i))
            .map(|(_, s)| s)
            .collect();
    }
    let specials = if generated > 0 {
        generate_special(rng, generated, filter)
    } else {
        Vec::new()
    };

    let mut entries: Vec<DatasetEntry> = trues
        .into_iter()
        .chain(falses)
        .map(|t| DatasetEntry {
            sample: BracketSample::new(t),
            multiplicity: 1,
        })
        .collect();
    entries.extend(specials.into_iter().map(|t| DatasetEntry {
        sample: BracketSample::new(t),
        multiplicity: copies,
    }));
    debug_assert!(entries.iter().all(|e| e.sample.category != Category::EqualNotNested));
    Ok(BracketDataset { entries, provenance: kind })
}

/// Out-of-distribution test set: balanced but not nested, uniform even length in `[2, 40]`.
pub fn ood_set<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<BracketSample> {
    (0..n)
        .map(|_| {
            let len = 2 * rng.gen_range(1..=MAX_LEN / 2);
            BracketSample::new(sample_equal_not_nested(rng, len))
        })
        .collect()
}

/// Fraction of `ood_set` rejected by `predict` (which returns the predicted label).
pub fn ood_accuracy_with(mut predict: impl FnMut(&[u32]) -> bool, ood_set: &[BracketSample]) -> Result<f64> {
    if ood_set.is_empty() {
        return Err(Error::InvalidArgument("empty OOD set".into()));
    }
    if ood_set.iter().any(|s| s.category != Category::EqualNotNested) {
        return Err(Error::InvalidArgument("OOD samples must be equal-count but not nested".into()));
    }
    let rejected = ood_set.iter().filter(|s| !predict(&s.tokens)).count();
    Ok(rejected as f64 / ood_set.len() as f64)
}

/// Predicted labels (`logit[1] > logit[0]`) of a bracket classifier.
pub fn predict<T: Scalar>(model: &Transformer, params: &ParamVector<T>, seqs: &[Vec<u32>]) -> Result<Vec<bool>> {
    if model.config().task_head != TaskHead::BinaryClassifier {
        return Err(Error::InvalidConfig("bracket prediction needs a binary classifier".into()));
    }
    let examples: Vec<Example> = seqs.iter().map(|s| Example::classify(s.clone(), false)).collect();
    Ok(model
        .forward(params, &examples)?
        .iter()
        .map(|o| o.logits[1] > o.logits[0])
        .collect())
}

pub fn ood_accuracy<T: Scalar>(model: &Transformer, params: &ParamVector<T>, ood: &[BracketSample]) -> Result<f64> {
    let seqs: Vec<Vec<u32>> = ood.iter().map(|s| s.tokens.clone()).collect();
    let preds = predict(model, params, &seqs)?;
    let mut it = preds.into_iter();
    ood_accuracy_with(|_| it.next().unwrap(), ood)
}

/// Fraction of samples (with multiplicity) whose predicted label matches.
pub fn accuracy<T: Scalar>(model: &Transformer, params: &ParamVector<T>, samples: &[&BracketSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty sample set".into()));
    }
    let seqs: Vec<Vec<u32>> = samples.iter().map(|s| s.tokens.clone()).collect();
    let preds = predict(model, params, &seqs)?;
    let correct = preds.iter().zip(samples).filter(|(p, s)| **p == s.label).count();
    Ok(correct as f64 / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn p(s: &str) -> Vec<u32> {
        parse(s).unwrap()
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify(&p("(()()())")), Category::Nested);
        assert_eq!(classify(&p("))((")), Category::EqualNotNested);
        assert_eq!(classify(&p("(()(")), Category::Neither);
        assert_eq!(classify(&[]), Category::Nested);
        assert_eq!(classify(&p(")")), Category::Neither);
    }

    #[test]
    fn filter_examples() {
        assert!(is_almost_nested(&p("((()))))")));
        assert!(!is_almost_nested(&p("()")));
        assert!(is_almost_nested(&p("))")));
        assert!(is_almost_equal(&p(")())((((")));
        assert!(!is_almost_equal(&p("((((((((")));
        assert!(is_almost_equal(&p("))")));
        assert!(!is_almost_equal(&p("((")));
    }

    #[test]
    fn dyck_path_matches_figure() {
        let path = DyckPath::new(&p(")())(((("));
        assert_eq!(path.heights, vec![0, -1, 0, -1, -2, -1, 0, 1, 2]);
        assert_eq!(DyckPath::new(&p("((()))))")).heights, vec![0, 1, 2, 3, 2, 1, 0, -1, -2]);
    }

    #[test]
    fn sampler_is_deterministic_and_even() {
        let a = sample_uniform(&mut ChaCha8Rng::seed_from_u64(3), 500);
        let b = sample_uniform(&mut ChaCha8Rng::seed_from_u64(3), 500);
        assert_eq!(a, b);
        assert!(sample_uniform(&mut ChaCha8Rng::seed_from_u64(3), 0).is_empty());
        assert!(a.iter().all(|s| s.len() % 2 == 0 && (2..=40).contains(&s.len())));
    }

    #[test]
    fn modified_distributions_have_expected_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = 0.01;
        let orig = build_distribution(Provenance::Original, s, &mut rng).unwrap();
        assert_eq!(orig.counts(), (1000, 1000));
        let an = build_distribution(Provenance::AlmostNested, s, &mut rng).unwrap();
        assert_eq!(an.counts(), (1000, 1000 - 366 + 2 * 183));
        let ae = build_distribution(Provenance::AlmostEqual, s, &mut rng).unwrap();
        assert_eq!(ae.counts(), (1000, 1000 - 671 + 4 * 190));
        for ds in [&orig, &an, &ae] {
            assert!(ds.expanded().iter().all(|x| classify(&x.tokens) != Category::EqualNotNested));
        }
        let specials: Vec<_> = an.entries.iter().filter(|e| e.multiplicity == 2).collect();
        assert_eq!(specials.len(), 183);
        assert!(specials.iter().all(|e| is_almost_nested(&e.sample.tokens)));
        let distinct: HashSet<_> = specials.iter().map(|e| &e.sample.tokens).collect();
        assert_eq!(distinct.len(), specials.len());
    }

    #[test]
    fn invalid_scale_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(build_distribution(Provenance::Original, 0.0, &mut rng).is_err());
        assert!(build_distribution(Provenance::Original, 1.5, &mut rng).is_err());
    }

    #[test]
    fn ood_accuracy_of_constant_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ood = ood_set(&mut rng, 50);
        assert_eq!(ood_accuracy_with(|_| false, &ood).unwrap(), 1.0);
        assert_eq!(ood_accuracy_with(|_| true, &ood).unwrap(), 0.0);
        assert!(ood_accuracy_with(|_| true, &[]).is_err());
        let nested = [BracketSample::new(p("()"))];
        assert!(ood_accuracy_with(|_| true, &nested).is_err());
    }

    #[test]
    fn tsv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ds = build_distribution(Provenance::AlmostEqual, 0.002, &mut rng).unwrap();
        let text = ds.to_tsv();
        let back = BracketDataset::from_tsv(&text, Provenance::AlmostEqual).unwrap();
        assert_eq!(back, ds);
        assert!(BracketDataset::from_tsv("(()\t1\t1\n", Provenance::Original).is_err());
    }
}
