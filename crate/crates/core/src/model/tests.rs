use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn tiny(task: TaskHead, attention_only: bool) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 6,
        d_head: 3,
        d_mlp: 8,
        vocab_size: 5,
        max_seq_len: 8,
        attention_only,
        task_head: task,
        numeric_precision: Precision::F64,
        layer_norm: true,
        causal: task == TaskHead::NextToken,
        init_std: 0.5,
    }
}

fn random_examples(cfg: &ModelConfig, n: usize, rng: &mut ChaCha8Rng) -> Vec<Example> {
    (0..n)
        .map(|_| {
            let len = rng.gen_range(2..=cfg.max_seq_len);
            let doc: Vec<u32> = (0..len + 1).map(|_| rng.gen_range(0..cfg.vocab_size as u32)).collect();
            match cfg.task_head {
                TaskHead::NextToken => {
                    let w: Vec<f64> = (0..doc.len()).map(|_| rng.gen_range(0.0..2.0)).collect();
                    Example::next_token_weighted(&doc, &w)
                }
                TaskHead::BinaryClassifier => {
                    Example::classify(doc[..len].to_vec(), rng.gen()).with_weight(rng.gen_range(0.5..1.5))
                }
            }
        })
        .collect()
}

#[test]
fn init_is_deterministic_and_seed_sensitive() {
    let m = Transformer::new(tiny(TaskHead::NextToken, true)).unwrap();
    let a: ParamVector<f64> = m.init_params(7);
    let b: ParamVector<f64> = m.init_params(7);
    assert_eq!(a.values, b.values);
    let c: ParamVector<f64> = m.init_params(8);
    let normal: Vec<usize> = a
        .segments()
        .iter()
        .filter(|s| !s.name.ends_with(".g") && !s.name.ends_with(".b") && !s.name.contains("b_"))
        .flat_map(|s| s.range())
        .collect();
    let differing = normal.iter().filter(|&&i| a.values[i] != c.values[i]).count();
    assert!(differing as f64 >= 0.99 * normal.len() as f64);
}

#[test]
fn degenerate_configs_are_rejected() {
    let mut cfg = tiny(TaskHead::NextToken, true);
    cfg.n_layers = 0;
    assert!(matches!(Transformer::new(cfg), Err(Error::InvalidConfig(_))));
    let mut cfg = tiny(TaskHead::NextToken, true);
    cfg.d_head = 0;
    assert!(Transformer::new(cfg).is_err());
    let mut cfg = tiny(TaskHead::NextToken, true);
    cfg.causal = false;
    assert!(Transformer::new(cfg).is_err());
}

#[test]
fn segments_partition_the_vector() {
    let m = Transformer::new(tiny(TaskHead::BinaryClassifier, false)).unwrap();
    let p: ParamVector<f64> = m.zero_params();
    let mut cursor = 0;
    for s in p.segments() {
        assert_eq!(s.start, cursor);
        cursor += s.len;
    }
    assert_eq!(cursor, p.len());
    assert!(p.segment("layer1.head1.W_O").is_some());
    assert!(p.segment("head.W").is_some());
    let mask = p.component_mask(&Component::named("layer0.head1")).unwrap();
    assert_eq!(mask.iter().filter(|&&b| b).count(), 4 * 6 * 3);
    assert!(p.component_mask(&Component::named("layer0.head")).is_err());
}

#[test]
fn zero_params_give_uniform_predictions_and_attention() {
    let cfg = tiny(TaskHead::NextToken, false);
    let m = Transformer::new(cfg.clone()).unwrap();
    let p: ParamVector<f64> = m.zero_params();
    let ex = Example::next_token(&[1, 2, 3, 4, 0, 1]);
    let out = m.forward(&p, std::slice::from_ref(&ex)).unwrap();
    let o = &out[0];
    assert_eq!(o.n_rows, 5);
    assert_eq!(o.n_out, 5);
    assert!(o.logits.iter().all(|&v| v == 0.0));
    let n = 5;
    for layer in &o.attention {
        for head in layer {
            for i in 0..n {
                for j in 0..n {
                    let expect = if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 };
                    assert!((head[i * n + j] - expect).abs() < 1e-15);
                }
            }
        }
    }
    let loss = m.loss(&p, &[ex]).unwrap();
    assert!((loss - 5f64.ln()).abs() < 1e-12);

    let cm = Transformer::new(tiny(TaskHead::BinaryClassifier, false)).unwrap();
    let cp: ParamVector<f64> = cm.zero_params();
    let loss = cm.loss(&cp, &[Example::classify(vec![0, 1, 1, 0], true)]).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn causal_mask_is_exact_and_logits_ignore_the_future() {
    let cfg = tiny(TaskHead::NextToken, false);
    let m = Transformer::new(cfg).unwrap();
    let p: ParamVector<f64> = m.init_params(3);
    let a = Example::next_token(&[1, 2, 3, 4, 0, 1, 2]);
    let mut b = a.clone();
    b.tokens[4] = 2;
    b.tokens[5] = 3;
    let out = m.forward(&p, &[a, b]).unwrap();
    let n = 6;
    for head in out[0].attention.iter().flatten() {
        for i in 0..n {
            for j in i + 1..n {
                assert_eq!(head[i * n + j], 0.0);
            }
            let s: f64 = head[i * n..(i + 1) * n].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
    for i in 0..4 {
        assert_eq!(out[0].row(i), out[1].row(i));
    }
    assert_ne!(out[0].row(4), out[1].row(4));
}

#[test]
fn later_layers_do_not_affect_earlier_attention() {
    let m = Transformer::new(tiny(TaskHead::NextToken, false)).unwrap();
    let p: ParamVector<f64> = m.init_params(11);
    let mut q = p.clone();
    for seg in p.segments().iter().filter(|s| s.name.starts_with("layer1.")) {
        for i in seg.range() {
            q.values[i] += 0.3;
        }
    }
    let ex = [Example::next_token(&[0, 1, 2, 3, 4, 0])];
    let a = m.forward(&p, &ex).unwrap();
    let b = m.forward(&q, &ex).unwrap();
    assert_eq!(a[0].attention[0], b[0].attention[0]);
    assert_ne!(a[0].attention[1], b[0].attention[1]);
}

#[test]
fn invalid_inputs_are_reported() {
    let m = Transformer::new(tiny(TaskHead::NextToken, true)).unwrap();
    let p: ParamVector<f64> = m.zero_params();
    let bad_token = Example::next_token(&[0, 9, 1]);
    assert!(matches!(m.forward(&p, &[bad_token]), Err(Error::TokenOutOfRange { .. })));
    let long = Example::next_token(&[0; 12]);
    assert!(matches!(m.forward(&p, &[long]), Err(Error::SequenceTooLong { .. })));
    assert!(matches!(m.loss_and_grad(&p, &[], None), Err(Error::EmptyBatch)));
}

fn check_gradient(cfg: ModelConfig, seed: u64) {
    let m = Transformer::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p: ParamVector<f64> = m.init_params(seed);
    let batch = random_examples(&cfg, 3, &mut rng);
    let (_, g) = m.loss_and_grad(&p, &batch, None).unwrap();
    let fd = m.finite_diff_grad(&p, &batch, 1e-5).unwrap();
    for (i, (&a, &f)) in g.values.iter().zip(&fd.values).enumerate() {
        if a.abs() > 1e-6 {
            let rel = (a - f).abs() / a.abs();
            assert!(rel < 1e-4, "coordinate {i}: analytic {a} vs fd {f}");
        } else {
            assert!((a - f).abs() < 1e-8, "coordinate {i}: analytic {a} vs fd {f}");
        }
    }
}

#[test]
fn gradient_matches_finite_differences() {
    check_gradient(tiny(TaskHead::NextToken, true), 1);
    check_gradient(tiny(TaskHead::NextToken, false), 2);
    check_gradient(tiny(TaskHead::BinaryClassifier, false), 3);
    let mut bidir = tiny(TaskHead::BinaryClassifier, false);
    bidir.layer_norm = false;
    check_gradient(bidir, 4);
}

#[test]
fn finite_differences_converge_quadratically() {
    let cfg = tiny(TaskHead::BinaryClassifier, false);
    let m = Transformer::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p: ParamVector<f64> = m.init_params(5);
    let batch = random_examples(&cfg, 2, &mut rng);
    let (_, g) = m.loss_and_grad(&p, &batch, None).unwrap();
    let err = |h: f64| -> f64 {
        let fd = m.finite_diff_grad(&p, &batch, h).unwrap();
        g.values.iter().zip(&fd.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    };
    let e1 = err(2e-2);
    let e2 = err(1e-2);
    let ratio = e1 / e2;
    assert!((3.0..5.0).contains(&ratio), "ratio {ratio} ({e1} / {e2})");
}

#[test]
fn unused_segment_has_zero_finite_difference() {
    // positions beyond the sequence never influence the loss
    let cfg = tiny(TaskHead::NextToken, true);
    let m = Transformer::new(cfg).unwrap();
    let p: ParamVector<f64> = m.init_params(9);
    let batch = [Example::next_token(&[0, 1, 2])];
    let fd = m.finite_diff_grad(&p, &batch, 1e-5).unwrap();
    let pos = p.segment("pos").unwrap();
    for i in pos.start + 2 * 6..pos.start + pos.len {
        assert!(fd.values[i].abs() < 1e-8);
    }
}

#[test]
fn restriction_zeroes_outside_component() {
    let cfg = tiny(TaskHead::NextToken, true);
    let m = Transformer::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p: ParamVector<f64> = m.init_params(2);
    let batch = random_examples(&cfg, 2, &mut rng);
    let mask = p.component_mask(&Component::named("layer1.head0")).unwrap();
    let (_, full) = m.loss_and_grad(&p, &batch, None).unwrap();
    let (_, g) = m.loss_and_grad(&p, &batch, Some(&mask)).unwrap();
    for i in 0..p.len() {
        if mask[i] {
            assert_eq!(g.values[i], full.values[i]);
        } else {
            assert_eq!(g.values[i], 0.0);
        }
    }
}

#[test]
fn doubling_weights_doubles_loss_and_gradient() {
    let cfg = tiny(TaskHead::NextToken, false);
    let m = Transformer::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p: ParamVector<f64> = m.init_params(4);
    let batch = random_examples(&cfg, 3, &mut rng);
    let doubled: Vec<Example> = batch
        .iter()
        .cloned()
        .map(|mut e| {
            e.weights = e.weights.map(|w| w.iter().map(|x| 2.0 * x).collect());
            e
        })
        .collect();
    let (l1, g1) = m.loss_and_grad(&p, &batch, None).unwrap();
    let (l2, g2) = m.loss_and_grad(&p, &doubled, None).unwrap();
    assert_eq!(l2, 2.0 * l1);
    for (a, b) in g1.values.iter().zip(&g2.values) {
        assert_eq!(*b, 2.0 * a);
    }
}

#[test]
fn loss_and_gradient_are_deterministic() {
    let cfg = tiny(TaskHead::BinaryClassifier, false);
    let m = Transformer::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p: ParamVector<f64> = m.init_params(6);
    let batch = random_examples(&cfg, 4, &mut rng);
    let (l1, g1) = m.loss_and_grad(&p, &batch, None).unwrap();
    let (l2, g2) = m.loss_and_grad(&p, &batch, None).unwrap();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(g1.values, g2.values);
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let cfg = tiny(TaskHead::BinaryClassifier, false);
    let m = Transformer::new(cfg.clone()).unwrap();
    let p: ParamVector<f64> = m.init_params(12);
    let bytes = write_checkpoint(&cfg, &p).unwrap();
    let (cfg2, p2) = read_checkpoint::<f64>(&bytes).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(p2, p);
    assert_eq!(write_checkpoint(&cfg2, &p2).unwrap(), bytes);

    let mut corrupt = bytes.clone();
    corrupt[0] = b'X';
    assert!(read_checkpoint::<f64>(&corrupt).is_err());
    assert!(read_checkpoint::<f64>(&bytes[..bytes.len() - 3]).is_err());
}
