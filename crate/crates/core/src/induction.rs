//! Synthetic corpus with controllable repeated bigrams, induction-pair
//! detection, attention head diagnostics and token masks from PCA projections.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{Example, ParamVector, TaskHead, Transformer};
use crate::{util, Error, Result, Scalar};

pub const PROBE_HALF_LEN: usize = 25;
pub const N_PROBES: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab_size: usize,
    pub documents: Vec<Vec<u32>>,
    /// Per-token loss weights aligned with `documents`.
    pub token_weights: Option<Vec<Vec<f64>>>,
}

impl Corpus {
    pub fn n_tokens(&self) -> usize {
        self.documents.iter().map(Vec::len).sum()
    }

    /// One next-token example per document, carrying the token weights.
    pub fn examples(&self) -> Vec<Example> {
        match &self.token_weights {
            None => self.documents.iter().map(|d| Example::next_token(d)).collect(),
            Some(ws) => self
                .documents
                .iter()
                .zip(ws)
                .map(|(d, w)| Example::next_token_weighted(d, w))
                .collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for d in &self.documents {
            let line: Vec<String> = d.iter().map(u32::to_string).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn weights_text(&self) -> Option<String> {
        self.token_weights.as_ref().map(|ws| {
            let mut out = String::new();
            for w in ws {
                let line: Vec<String> = w.iter().map(|&x| util::fmt_f64(x)).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
            out
        })
    }

    pub fn from_text(text: &str, vocab_size: usize, weights: Option<&str>) -> Result<Self> {
        let bad = |d: String| Error::format("corpus file", d);
        let mut documents = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let doc = line
                .split_whitespace()
                .map(|s| match s.parse::<u32>() {
                    Ok(t) if (t as usize) < vocab_size => Ok(t),
                    _ => Err(bad(format!("line {}: bad token {s:?}", n + 1))),
                })
                .collect::<Result<Vec<u32>>>()?;
            documents.push(doc);
        }
        let token_weights = match weights {
            None => None,
            Some(wtext) => {
                let ws: Vec<Vec<f64>> = wtext
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(|l| {
                        l.split_whitespace()
                            .map(|s| s.parse::<f64>().map_err(|_| bad(format!("bad weight {s:?}"))))
                            .collect()
                    })
                    .collect::<Result<_>>()?;
                if ws.len() != documents.len() || ws.iter().zip(&documents).any(|(w, d)| w.len() != d.len()) {
                    return Err(bad("weights file is not aligned with the corpus".into()));
                }
                if ws.iter().flatten().any(|&x| !(x >= 0.0 && x.is_finite())) {
                    return Err(bad("weights must be non-negative".into()));
                }
                Some(ws)
            }
        };
        Ok(Corpus {
            vocab_size,
            documents,
            token_weights,
        })
    }

    /// Writes `<stem>.txt` and, when weighted, `<stem>.weights.txt`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        util::write_file(dir.join(format!("{stem}.txt")), self.to_text())?;
        if let Some(w) = self.weights_text() {
            util::write_file(dir.join(format!("{stem}.weights.txt")), w)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, stem: &str, vocab_size: usize) -> Result<Self> {
        let dir = dir.as_ref();
        let text = util::read_text(dir.join(format!("{stem}.txt")))?;
        let wpath = dir.join(format!("{stem}.weights.txt"));
        let weights = if wpath.exists() { Some(util::read_text(wpath)?) } else { None };
        Corpus::from_text(&text, vocab_size, weights.as_deref())
    }
}

/// Random documents in which, with probability `repeat_rate` per position,
/// the next token continues an earlier occurrence of the current token
/// (re-emitting a bigram already seen in the document).
pub fn gen_corpus<R: Rng + ?Sized>(
    vocab_size: usize,
    n_docs: usize,
    doc_len: usize,
    repeat_rate: f64,
    rng: &mut R,
) -> Result<Corpus> {
    if doc_len < 4 {
        return Err(Error::InvalidArgument("doc_len must be at least 4".into()));
    }
    if !(0.0..=1.0).contains(&repeat_rate) {
        return Err(Error::InvalidArgument("repeat_rate must be in [0, 1]".into()));
    }
    if vocab_size < 2 {
        return Err(Error::InvalidArgument("vocab_size must be at least 2".into()));
    }
    let mut documents = Vec::with_capacity(n_docs);
    let mut successors: Vec<Vec<u32>> = vec![Vec::new(); vocab_size];
    for _ in 0..n_docs {
        successors.iter_mut().for_each(Vec::clear);
        let mut doc: Vec<u32> = Vec::with_capacity(doc_len);
        for p in 0..doc_len {
            let prev = doc.last().copied();
            let copy = repeat_rate > 0.0 && rng.gen_bool(repeat_rate);
            let tok = match prev {
                Some(t) if copy && !successors[t as usize].is_empty() => {
                    let opts = &successors[t as usize];
                    opts[rng.gen_range(0..opts.len())]
                }
                _ => rng.gen_range(0..vocab_size as u32),
            };
            if p >= 1 {
                successors[doc[p - 1] as usize].push(tok);
            }
            doc.push(tok);
        }
        documents.push(doc);
    }
    Ok(Corpus {
        vocab_size,
        documents,
        token_weights: None,
    })
}

/// Positions `(document, p)` whose bigram `(tokens[p−1], tokens[p])` already
/// occurred ending strictly before `p`, sorted.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InductionPairSet {
    pub positions: Vec<(usize, usize)>,
}

impl InductionPairSet {
    pub fn contains(&self, doc: usize, pos: usize) -> bool {
        self.positions.binary_search(&(doc, pos)).is_ok()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

pub fn induction_positions(doc: &[u32]) -> Vec<usize> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for p in 2..doc.len() {
        seen.insert((doc[p - 2], doc[p - 1]));
        if seen.contains(&(doc[p - 1], doc[p])) {
            out.push(p);
        }
    }
    out
}

pub fn find_induction_pairs(corpus: &Corpus) -> InductionPairSet {
    InductionPairSet {
        positions: corpus
            .documents
            .iter()
            .enumerate()
            .flat_map(|(d, doc)| induction_positions(doc).into_iter().map(move |p| (d, p)))
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadScores {
    pub heads: Vec<String>,
    pub prefix_matching: Vec<f64>,
    pub previous_token: Vec<f64>,
}

impl HeadScores {
    pub fn max_prefix_matching(&self) -> f64 {
        self.prefix_matching.iter().cloned().fold(0.0, f64::max)
    }

    pub fn max_previous_token(&self) -> f64 {
        self.previous_token.iter().cloned().fold(0.0, f64::max)
    }
}

/// `n_probes` sequences `s·s` with `|s| = half_len` and uniform tokens.
pub fn make_probes<R: Rng + ?Sized>(rng: &mut R, vocab_size: usize, half_len: usize, n_probes: usize) -> Vec<Vec<u32>> {
    (0..n_probes)
        .map(|_| {
            let s: Vec<u32> = (0..half_len).map(|_| rng.gen_range(0..vocab_size as u32)).collect();
            [s.clone(), s].concat()
        })
        .collect()
}

/// Sums of previous-token and prefix-matching attention for one `n × n`
/// pattern of a doubled probe with half length `half`, with their counts.
///
/// Previous token: weight from `i` to `i − 1` for `i ≥ 1`. Prefix matching:
/// weight from second-half position `i` to `i − half + 1`.
pub fn pattern_scores<T: Scalar>(attn: &[T], n: usize, half: usize) -> ((f64, usize), (f64, usize)) {
    debug_assert_eq!(attn.len(), n * n);
    let prev: f64 = (1..n).map(|i| attn[i * n + i - 1].f64()).sum();
    let prefix: f64 = (half..n).map(|i| attn[i * n + i + 1 - half].f64()).sum();
    ((prefix, n - half), (prev, n - 1))
}

/// Mean previous-token and prefix-matching scores of every head over the probes.
pub fn head_scores<T: Scalar>(model: &Transformer, params: &ParamVector<T>, probes: &[Vec<u32>]) -> Result<HeadScores> {
    if model.config().task_head != TaskHead::NextToken {
        return Err(Error::InvalidConfig("head scores need a next-token model".into()));
    }
    if probes.is_empty() {
        return Err(Error::InvalidArgument("no probes".into()));
    }
    for p in probes {
        let half = p.len() / 2;
        if p.len() < 4 || p.len() % 2 != 0 || p[..half] != p[half..] {
            return Err(Error::InvalidArgument("probe is not a doubled sequence".into()));
        }
    }
    let n_heads = model.config().n_heads;
    let n_layers = model.config().n_layers;
    let per_probe: Vec<Result<Vec<(f64, usize, f64, usize)>>> = probes
        .par_iter()
        .map(|p| {
            let ex = Example {
                tokens: p.clone(),
                targets: p.clone(),
                weights: None,
            };
            let out = model.forward(params, std::slice::from_ref(&ex))?;
            let n = p.len();
            Ok(out[0]
                .attention
                .iter()
                .flat_map(|layer| {
                    layer.iter().map(move |a| {
                        let ((pm, pm_n), (pt, pt_n)) = pattern_scores(a, n, n / 2);
                        (pm, pm_n, pt, pt_n)
                    })
                })
                .collect())
        })
        .collect();
    let mut sums = vec![(0.0, 0usize, 0.0, 0usize); n_layers * n_heads];
    for r in per_probe {
        for (acc, x) in sums.iter_mut().zip(r?) {
            acc.0 += x.0;
            acc.1 += x.1;
            acc.2 += x.2;
            acc.3 += x.3;
        }
    }
    Ok(HeadScores {
        heads: model.head_names(),
        prefix_matching: sums.iter().map(|s| s.0 / s.1 as f64).collect(),
        previous_token: sums.iter().map(|s| s.2 / s.3 as f64).collect(),
    })
}

/// Named `(a, b)` pairs for [`apply_token_mask`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskPreset {
    #[serde(rename = "Repress-0x")]
    Repress0x,
    #[serde(rename = "Baseline-1x")]
    Baseline1x,
    #[serde(rename = "Induce-2x")]
    Induce2x,
    #[serde(rename = "Induce-4x")]
    Induce4x,
}

impl MaskPreset {
    pub const ALL: [MaskPreset; 4] = [
        MaskPreset::Repress0x,
        MaskPreset::Baseline1x,
        MaskPreset::Induce2x,
        MaskPreset::Induce4x,
    ];

    pub fn weights(self) -> (f64, f64) {
        match self {
            MaskPreset::Repress0x => (0.0, 1.0),
            MaskPreset::Baseline1x => (1.0, 1.0),
            MaskPreset::Induce2x => (2.0, 1.0),
            MaskPreset::Induce4x => (4.0, 1.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskPreset::Repress0x => "Repress-0x",
            MaskPreset::Baseline1x => "Baseline-1x",
            MaskPreset::Induce2x => "Induce-2x",
            MaskPreset::Induce4x => "Induce-4x",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mask preset `{s}`")))
    }
}

/// `a` for `pc2 ≤ −2`, `b` for `pc2 ≥ 0`, linear in between.
pub fn mask_weight(pc2: f64, a: f64, b: f64) -> f64 {
    if pc2 <= -2.0 {
        a
    } else if pc2 >= 0.0 {
        b
    } else {
        a + (b - a) * (pc2 + 2.0) / 2.0
    }
}

/// Attach per-token weights computed from projection values aligned with the corpus.
pub fn apply_token_mask(corpus: &Corpus, pc2: &[Vec<f64>], a: f64, b: f64) -> Result<Corpus> {
    if !(a >= 0.0 && b >= 0.0) {
        return Err(Error::InvalidArgument("mask weights must be non-negative".into()));
    }
    if pc2.len() != corpus.documents.len() || pc2.iter().zip(&corpus.documents).any(|(p, d)| p.len() != d.len()) {
        return Err(Error::Shape("projection values are not aligned with the corpus".into()));
    }
    let weights = pc2
        .iter()
        .map(|doc| doc.iter().map(|&x| mask_weight(x, a, b)).collect())
        .collect();
    Ok(Corpus {
        token_weights: Some(weights),
        ..corpus.clone()
    })
}

/// Per-token table `doc,pos,token,induction_pair` used for reports.
pub fn pairs_csv(corpus: &Corpus, pairs: &InductionPairSet) -> String {
    let mut out = String::from("doc,pos,token,induction_pair\n");
    for (d, doc) in corpus.documents.iter().enumerate() {
        for (p, t) in doc.iter().enumerate() {
            let _ = writeln!(out, "{d},{p},{t},{}", pairs.contains(d, p) as u8);
        }
    }
    out
}
