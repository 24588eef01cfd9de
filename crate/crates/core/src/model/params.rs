use std::ops::Range;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, TaskHead};
use crate::{Error, Result, Scalar};

/// A named contiguous range of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

/// Flat parameter vector with a segment table partitioning it.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector<T> {
    pub values: Vec<T>,
    segments: Arc<Vec<Segment>>,
}

/// A set of parameter segments selected by name, or the whole model.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(untagged)]
pub enum Component {
    All,
    Named(Vec<String>),
}

impl Component {
    pub fn named<S: Into<String>>(name: S) -> Self {
        Component::Named(vec![name.into()])
    }

    /// Parses `ALL` or a comma-separated list of segment names/prefixes.
    pub fn parse(s: &str) -> Self {
        if s.trim().eq_ignore_ascii_case("all") {
            Component::All
        } else {
            Component::Named(s.split(',').map(|p| p.trim().to_string()).collect())
        }
    }

    pub fn label(&self) -> String {
        match self {
            Component::All => "ALL".to_string(),
            Component::Named(names) => names.join(","),
        }
    }
}

impl<T: Scalar> ParamVector<T> {
    pub fn from_parts(values: Vec<T>, segments: Vec<Segment>) -> Result<Self> {
        let mut cursor = 0;
        let mut seen = std::collections::HashSet::new();
        for seg in &segments {
            if seg.start != cursor {
                return Err(Error::Shape(format!(
                    "segment `{}` starts at {} but previous segment ended at {}",
                    seg.name, seg.start, cursor
                )));
            }
            if !seen.insert(seg.name.as_str()) {
                return Err(Error::Shape(format!("duplicate segment `{}`", seg.name)));
            }
            cursor += seg.len;
        }
        if cursor != values.len() {
            return Err(Error::Shape(format!(
                "segments cover {} values but vector has {}",
                cursor,
                values.len()
            )));
        }
        Ok(ParamVector {
            values,
            segments: Arc::new(segments),
        })
    }

    pub fn zeros_like(&self) -> Self {
        ParamVector {
            values: vec![T::zero(); self.values.len()],
            segments: Arc::clone(&self.segments),
        }
    }

    pub fn with_values(&self, values: Vec<T>) -> Self {
        assert_eq!(values.len(), self.values.len());
        ParamVector {
            values,
            segments: Arc::clone(&self.segments),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn slice(&self, name: &str) -> Option<&[T]> {
        self.segment(name).map(|s| &self.values[s.range()])
    }

    pub fn slice_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let range = self.segment(name)?.range();
        Some(&mut self.values[range])
    }

    /// Coordinate mask selecting `component`. A name selects the segment with
    /// that exact name and every segment nested below it (`layer0.head1`
    /// selects `layer0.head1.W_Q`, ...).
    pub fn component_mask(&self, component: &Component) -> Result<Vec<bool>> {
        let mut mask = vec![false; self.values.len()];
        match component {
            Component::All => mask.iter_mut().for_each(|m| *m = true),
            Component::Named(names) => {
                for name in names {
                    let mut hit = false;
                    for seg in self.segments.iter() {
                        if segment_matches(&seg.name, name) {
                            hit = true;
                            mask[seg.range()].iter_mut().for_each(|m| *m = true);
                        }
                    }
                    if !hit {
                        return Err(Error::UnknownComponent(name.clone()));
                    }
                }
            }
        }
        Ok(mask)
    }

    pub fn cast<U: Scalar>(&self) -> ParamVector<U> {
        ParamVector {
            values: self.values.iter().map(|&v| U::of(v.f64())).collect(),
            segments: Arc::clone(&self.segments),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm_sq(&self) -> T {
        self.values.iter().map(|&v| v * v).sum()
    }
}

fn segment_matches(segment: &str, name: &str) -> bool {
    segment == name
        || (segment.len() > name.len()
            && segment.starts_with(name)
            && segment.as_bytes()[name.len()] == b'.')
}

/// Offsets of one attention head's projection matrices.
#[derive(Clone, Debug)]
pub(crate) struct HeadOffsets {
    pub q: usize,
    pub k: usize,
    pub v: usize,
    pub o: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct MlpOffsets {
    pub ln_g: Option<usize>,
    pub ln_b: Option<usize>,
    pub w_in: usize,
    pub b_in: usize,
    pub w_out: usize,
    pub b_out: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct LayerOffsets {
    pub ln_g: Option<usize>,
    pub ln_b: Option<usize>,
    pub heads: Vec<HeadOffsets>,
    pub mlp: Option<MlpOffsets>,
}

/// Where every tensor of a model lives in the flat vector.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub embed: usize,
    pub pos: usize,
    pub layers: Vec<LayerOffsets>,
    pub lnf_g: Option<usize>,
    pub lnf_b: Option<usize>,
    pub out_w: usize,
    pub out_b: usize,
    pub n_out: usize,
    pub segments: Arc<Vec<Segment>>,
    pub total: usize,
}

#[derive(Clone, Copy)]
enum InitKind {
    Normal,
    Zero,
    One,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut segments: Vec<Segment> = Vec::new();
        let mut cursor = 0usize;
        let mut push = |name: String, len: usize| -> usize {
            let start = cursor;
            segments.push(Segment { name, start, len });
            cursor += len;
            start
        };
        let d = cfg.d_model;
        let dh = cfg.d_head;
        let embed = push("embed".into(), cfg.vocab_size * d);
        let pos = push("pos".into(), cfg.max_seq_len * d);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let (ln_g, ln_b) = if cfg.layer_norm {
                (
                    Some(push(format!("layer{l}.ln1.g"), d)),
                    Some(push(format!("layer{l}.ln1.b"), d)),
                )
            } else {
                (None, None)
            };
            let heads = (0..cfg.n_heads)
                .map(|h| HeadOffsets {
                    q: push(format!("layer{l}.head{h}.W_Q"), d * dh),
                    k: push(format!("layer{l}.head{h}.W_K"), d * dh),
                    v: push(format!("layer{l}.head{h}.W_V"), d * dh),
                    o: push(format!("layer{l}.head{h}.W_O"), dh * d),
                })
                .collect();
            let mlp = if cfg.attention_only {
                None
            } else {
                let m = cfg.d_mlp;
                let (g, b) = if cfg.layer_norm {
                    (
                        Some(push(format!("layer{l}.ln2.g"), d)),
                        Some(push(format!("layer{l}.ln2.b"), d)),
                    )
                } else {
                    (None, None)
                };
                Some(MlpOffsets {
                    ln_g: g,
                    ln_b: b,
                    w_in: push(format!("layer{l}.mlp.W_in"), d * m),
                    b_in: push(format!("layer{l}.mlp.b_in"), m),
                    w_out: push(format!("layer{l}.mlp.W_out"), m * d),
                    b_out: push(format!("layer{l}.mlp.b_out"), d),
                })
            };
            layers.push(LayerOffsets {
                ln_g,
                ln_b,
                heads,
                mlp,
            });
        }
        let (lnf_g, lnf_b) = if cfg.layer_norm {
            (
                Some(push("ln_f.g".into(), d)),
                Some(push("ln_f.b".into(), d)),
            )
        } else {
            (None, None)
        };
        let (prefix, n_out) = match cfg.task_head {
            TaskHead::NextToken => ("unembed", cfg.vocab_size),
            TaskHead::BinaryClassifier => ("head", 2),
        };
        let out_w = push(format!("{prefix}.W"), d * n_out);
        let out_b = push(format!("{prefix}.b"), n_out);
        let total = cursor;
        Layout {
            embed,
            pos,
            layers,
            lnf_g,
            lnf_b,
            out_w,
            out_b,
            n_out,
            segments: Arc::new(segments),
            total,
        }
    }

    pub fn zeros<T: Scalar>(&self) -> ParamVector<T> {
        ParamVector {
            values: vec![T::zero(); self.total],
            segments: Arc::clone(&self.segments),
        }
    }

    /// Zero-mean normal (std `init_std`) weights, unit layer-norm gains, zero biases.
    pub fn init<T: Scalar>(&self, cfg: &ModelConfig, seed: u64) -> ParamVector<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, cfg.init_std).expect("init_std is finite and positive");
        let mut values = vec![T::zero(); self.total];
        for seg in self.segments.iter() {
            let kind = init_kind_for(&seg.name);
            for v in &mut values[seg.range()] {
                *v = match kind {
                    InitKind::Normal => T::of(normal.sample(&mut rng)),
                    InitKind::Zero => T::zero(),
                    InitKind::One => T::one(),
                };
            }
        }
        ParamVector {
            values,
            segments: Arc::clone(&self.segments),
        }
    }
}

fn init_kind_for(name: &str) -> InitKind {
    if name.ends_with(".g") {
        InitKind::One
    } else if name.ends_with(".b") || name.ends_with("b_in") || name.ends_with("b_out") {
        InitKind::Zero
    } else {
        InitKind::Normal
    }
}
