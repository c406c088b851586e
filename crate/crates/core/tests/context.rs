use switched_contrastive::context::*;
use switched_contrastive::encoder::{encode, ConvLayer, EncoderConfig};
use switched_contrastive::params::{Bound, ParamSet};
use switched_contrastive::rng::{RandomSource, RngStream};
use switched_contrastive::tensor::{finite_difference_check, Scalar, Tape, Tensor};
use switched_contrastive::Error;

fn small() -> ContextConfig {
    ContextConfig {
        blocks: 2,
        model_dim: 8,
        heads: 2,
        ffn_dim: 16,
        dropout: 0.1,
        pos_conv_kernel: 3,
        pos_conv_groups: 2,
    }
}

fn params<T: Scalar>(cfg: &ContextConfig, input: usize, seed: u64) -> ParamSet<T> {
    let mut p = ParamSet::new();
    cfg.init_params(input, &mut p, &mut RngStream::new(seed, 0));
    p
}

fn randn<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = RngStream::new(seed, 1);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::of(rng.normal())).collect()).unwrap()
}

#[test]
fn span_mask_fraction_matches_closed_form() {
    let (frames, p, span) = (120, 0.1, 4);
    let mut rng = RngStream::new(3, 3);
    let trials = 4000;
    let mut hits = 0usize;
    let interior = span - 1..frames;
    for _ in 0..trials {
        let m = sample_masks(frames, p, span, &mut rng).unwrap();
        hits += m.iter().filter(|t| interior.contains(t)).count();
    }
    let observed = hits as f64 / (trials * interior.len()) as f64;
    let expected = 1.0 - (1.0 - p).powi(span as i32);
    let sigma = (expected * (1.0 - expected) / (trials * interior.len()) as f64).sqrt();
    // Neighbouring frames are correlated, so allow a generous band.
    assert!((observed - expected).abs() < 10.0 * sigma, "{observed} vs {expected}");
}

#[test]
fn mask_sampling_examples() {
    let mut rng = RngStream::new(1, 1);
    assert_eq!(sample_masks(23, 1.0, 1, &mut rng).unwrap(), (0..23).collect::<Vec<_>>());
    for _ in 0..20 {
        assert_eq!(sample_masks(23, 0.0, 3, &mut rng).unwrap().len(), 1);
    }
    assert!(matches!(sample_masks(0, 0.2, 1, &mut rng), Err(Error::Usage(_))));
}

#[test]
fn apply_mask_examples() {
    let tape = Tape::<f64>::new();
    let z = tape.constant(randn(&[2, 5, 3], 1));
    let emb = tape.constant(Tensor::new(vec![3], vec![9.0, 8.0, 7.0]).unwrap());
    let one = MaskSpec::new(5, vec![vec![2], vec![4]]).unwrap();
    let out = apply_mask(z, &one, emb).unwrap().value();
    let zin = z.value();
    let changed: Vec<usize> = (0..10)
        .filter(|&r| out.data()[3 * r..3 * r + 3] != zin.data()[3 * r..3 * r + 3])
        .collect();
    assert_eq!(changed, vec![2, 9]);
    assert_eq!(&out.data()[6..9], &[9.0, 8.0, 7.0]);

    let all = MaskSpec::new(5, vec![(0..5).collect(), (0..5).collect()]).unwrap();
    let out = apply_mask(z, &all, emb).unwrap().value();
    assert!(out.data().chunks(3).all(|r| r == [9.0, 8.0, 7.0]));

    let wrong = MaskSpec::new(6, vec![vec![5], vec![0]]).unwrap();
    assert!(matches!(apply_mask(z, &wrong, emb), Err(Error::Usage(_))));
}

fn run(cfg: &ContextConfig, p: &ParamSet<f32>, x: &Tensor<f32>, dropout: Option<&DropoutMasks>) -> (Tensor<f32>, Vec<Tensor<f32>>) {
    let tape = Tape::new();
    let bound = p.bind(&tape, false);
    let out = contextualize(tape.constant(x.clone()), cfg, &bound, dropout).unwrap();
    (out.c.value(), out.attention.iter().map(|a| a.value()).collect())
}

#[test]
fn desk_shape_determinism_and_attention() {
    let cfg = ContextConfig::default();
    let p = params(&cfg, 64, 2);
    let x = randn::<f32>(&[2, 23, 64], 3);
    let (a, attn) = run(&cfg, &p, &x, None);
    assert_eq!(a.shape(), &[2, 23, 64]);
    assert!(a.bit_eq(&run(&cfg, &p, &x, None).0));
    for probs in attn {
        for row in probs.data().chunks(23) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().map(|&v| f64::from(v)).sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    let tape = Tape::new();
    let bound = p.bind(&tape, false);
    let bad = tape.constant(Tensor::<f32>::zeros(vec![2, 23, 32]));
    assert!(matches!(contextualize(bad, &cfg, &bound, None), Err(Error::Usage(_))));
}

#[test]
fn identical_halves_with_shared_dropout_are_bit_identical() {
    let cfg = small();
    let p = params(&cfg, 8, 4);
    let half = randn::<f32>(&[1, 12, 8], 5);
    let stacked = Tensor::concat0(&[&half, &half]).unwrap();
    let masks = DropoutMasks::draw(&cfg, 1, 12, &mut RngStream::new(6, 6));
    let (c, _) = run(&cfg, &p, &stacked, Some(&masks.concat(&masks)));
    let n = 12 * 8;
    assert_eq!(c.data()[..n], c.data()[n..]);
}

#[test]
fn dropout_masks_have_the_right_rate() {
    let cfg = ContextConfig {
        dropout: 0.25,
        ..small()
    };
    let m = DropoutMasks::draw(&cfg, 4, 100, &mut RngStream::new(1, 1));
    assert_eq!(m.sites.len(), cfg.dropout_sites());
    let total: usize = m.sites.iter().map(Vec::len).sum();
    let dropped = m.sites.iter().flatten().filter(|&&k| !k).count();
    let rate = dropped as f64 / total as f64;
    assert!((rate - 0.25).abs() < 0.01, "{rate}");
}

#[test]
fn unmasked_context_reaches_masked_positions() {
    let cfg = small();
    let p = params(&cfg, 8, 7);
    let x = randn::<f32>(&[1, 16, 8], 8);
    let spec = MaskSpec::new(16, vec![vec![3, 4, 5]]).unwrap();
    let masked_out = |x: &Tensor<f32>| {
        let tape = Tape::new();
        let bound = p.bind(&tape, false);
        let xm = apply_mask(tape.constant(x.clone()), &spec, bound.get("context.mask_embedding").unwrap()).unwrap();
        contextualize(xm, &cfg, &bound, None).unwrap().c.value().data()[4 * 8..5 * 8].to_vec()
    };
    let base = masked_out(&x);
    let mut data = x.to_vec();
    data[12 * 8] += 1.0;
    let moved = masked_out(&Tensor::new(vec![1, 16, 8], data).unwrap());
    let diff: f32 = base.iter().zip(&moved).map(|(a, b)| (a - b) * (a - b)).sum::<f32>().sqrt();
    assert!(diff > 0.0);
}

#[test]
fn end_to_end_gradient() {
    let enc = EncoderConfig {
        layers: vec![ConvLayer::new(8, 4, 2)],
        group_norm_groups: Some(4),
        ..EncoderConfig::default()
    };
    let cfg = ContextConfig {
        blocks: 1,
        ..small()
    };
    let mut p = ParamSet::<f64>::new();
    let mut rng = RngStream::new(9, 0);
    enc.init_params(&mut p, &mut rng);
    cfg.init_params(enc.dim(), &mut p, &mut rng);
    let names: Vec<String> = p.names().map(String::from).collect();
    let tensors: Vec<Tensor<f64>> = p.iter().map(|(_, t)| t.clone()).collect();
    let wave = randn::<f64>(&[2, 24], 10);
    let spec = MaskSpec::new(11, vec![vec![1, 2, 3, 8], vec![0, 5]]).unwrap();
    let masks = DropoutMasks::draw(&cfg, 2, 11, &mut RngStream::new(11, 0));
    let head = randn::<f64>(&[2, 11, 8], 12);
    let r = finite_difference_check(
        |tape, vars| {
            let bound = Bound::from_vars(names.iter().map(String::as_str), vars);
            let z = encode(tape.constant(wave.clone()), &enc, &bound)?;
            let x = apply_mask(project(z, &bound)?, &spec, bound.get("context.mask_embedding")?)?;
            let c = contextualize(x, &cfg, &bound, Some(&masks))?.c;
            Ok(c.mul(tape.constant(head.clone()))?.sum())
        },
        &tensors,
        1e-5,
    )
    .unwrap();
    assert!(r.max_relative_error < 1e-4, "{r:?}");
}

#[test]
fn config_validation() {
    assert!(ContextConfig { heads: 3, ..small() }.validate().is_err());
    assert!(ContextConfig { pos_conv_kernel: 4, ..small() }.validate().is_err());
    assert!(ContextConfig { dropout: 1.0, ..small() }.validate().is_err());
    assert_eq!(small().dropout_sites(), 5);
    ContextConfig::base().validate().unwrap();
}
