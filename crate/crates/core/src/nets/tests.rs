use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{GradcheckReport, DEFAULT_STEP, TOLERANCE};

fn tiny() -> BackboneConfig {
    BackboneConfig {
        in_channels: None,
        first_conv_channels: 4,
        growth_rate: 2,
        layers_per_dense_block: 1,
        n_pool: 1,
        dropout_rate: 0.0,
        bottleneck_layers: 1,
    }
}

fn random_input(shape: (usize, usize, usize, usize), seed: u64, dtype: DType) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu)
        .unwrap()
        .to_dtype(dtype)
        .unwrap()
}

#[test]
fn static_shape_contract() {
    let m = build_model(ModelVariant::Static, &BackboneConfig::default()).unwrap();
    let out = m
        .forward(
            &random_input((1, 2, 64, 64), 1, DType::F32),
            &mut Mode::Eval,
        )
        .unwrap();
    assert_eq!(out.prob.dims(), &[1, 1, 64, 64]);
    assert!(out.field.is_none());
    let p = out.prob.flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn multitask_shape_contract_and_zero_field() {
    let m = build_model(
        ModelVariant::MultitaskLongitudinal,
        &BackboneConfig::default(),
    )
    .unwrap();
    let out = m
        .forward(
            &random_input((1, 4, 64, 64), 2, DType::F32),
            &mut Mode::Eval,
        )
        .unwrap();
    assert_eq!(out.prob.dims(), &[1, 1, 64, 64]);
    let field = out.field.unwrap();
    assert_eq!(field.dims(), &[1, 2, 64, 64]);
    let f = field.flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert!(
        f.iter().all(|v| *v == 0.0),
        "field head starts at the identity warp"
    );
}

#[test]
fn default_multitask_parameter_count() {
    let m = build_model(
        ModelVariant::MultitaskLongitudinal,
        &BackboneConfig::default(),
    )
    .unwrap();
    let n = count_parameters(&m);
    assert!((1_500_000..=2_500_000).contains(&n), "{n}");
    assert_eq!(n, PINNED_MULTITASK_PARAMS);
}

const PINNED_MULTITASK_PARAMS: usize = 2_047_443;

#[test]
fn parameter_count_closed_form() {
    let mut ps = ParamStore::new(DType::F32, 0);
    Conv2d::new(&mut ps, "a", 3, 5, 3).unwrap();
    assert_eq!(ps.count_trainable(), 5 * (3 * 9 + 1));
    Conv2d::new(&mut ps, "b", 7, 2, 1).unwrap();
    assert_eq!(ps.count_trainable(), 5 * (3 * 9 + 1) + 2 * (7 + 1));
}

#[test]
fn variant_channel_mismatch_is_rejected() {
    let cfg = BackboneConfig {
        in_channels: Some(4),
        ..tiny()
    };
    assert!(matches!(
        build_model(ModelVariant::Static, &cfg),
        Err(NetError::ChannelMismatch {
            expected: 2,
            got: 4,
            ..
        })
    ));
    let m = build_model(ModelVariant::Static, &tiny()).unwrap();
    assert!(matches!(
        m.forward(&random_input((1, 4, 8, 8), 0, DType::F32), &mut Mode::Eval),
        Err(NetError::ChannelMismatch { .. })
    ));
}

#[test]
fn unpadded_input_names_multiple() {
    let m = build_model(ModelVariant::Static, &BackboneConfig::default()).unwrap();
    let err = m
        .forward(
            &random_input((1, 2, 48, 64), 0, DType::F32),
            &mut Mode::Eval,
        )
        .unwrap_err();
    assert!(err.to_string().contains("multiple of 32"), "{err}");
}

#[test]
fn eval_is_deterministic_and_bounded() {
    for variant in ModelVariant::ALL {
        let cfg = BackboneConfig {
            n_pool: 2,
            ..tiny()
        };
        let m = build_model(variant, &cfg).unwrap();
        let c = variant.input_channels();
        let x = random_input((2, c, 16, 16), 3, DType::F32);
        let a = m
            .forward(&x, &mut Mode::Eval)
            .unwrap()
            .prob
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        let b = m
            .forward(&x, &mut Mode::Eval)
            .unwrap()
            .prob
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        assert_eq!(a, b);
        let z = Tensor::zeros((1, c, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let p = m
            .forward(&z, &mut Mode::Eval)
            .unwrap()
            .prob
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        assert!(p.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }
}

#[test]
fn training_mode_dropout_depends_on_rng() {
    let cfg = BackboneConfig {
        dropout_rate: 0.5,
        ..tiny()
    };
    let m = build_model(ModelVariant::Static, &cfg).unwrap();
    let x = random_input((2, 2, 8, 8), 4, DType::F32);
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        m.forward(&x, &mut Mode::Train(&mut rng))
            .unwrap()
            .prob
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

#[test]
fn multitask_runs_encoder_once_per_forward() {
    let m = build_model(ModelVariant::MultitaskLongitudinal, &tiny()).unwrap();
    let x = random_input((1, 4, 8, 8), 5, DType::F32);
    assert_eq!(m.encoder_calls(), 0);
    m.forward(&x, &mut Mode::Eval).unwrap();
    assert_eq!(m.encoder_calls(), 1);
    m.forward(&x, &mut Mode::Eval).unwrap();
    assert_eq!(m.encoder_calls(), 2);
}

#[test]
fn multitask_decoders_share_topology() {
    let m = build_model(
        ModelVariant::MultitaskLongitudinal,
        &BackboneConfig::default(),
    )
    .unwrap();
    let stages = m.stages();
    let seg: Vec<_> = stages
        .iter()
        .filter(|s| s.name.starts_with("seg_decoder"))
        .collect();
    let field: Vec<_> = stages
        .iter()
        .filter(|s| s.name.starts_with("field_decoder"))
        .collect();
    assert_eq!(seg.len(), field.len());
    for (a, b) in seg.iter().zip(&field) {
        assert_eq!(a.in_channels, b.in_channels);
        if a.name.ends_with("head") {
            assert_eq!((a.out_channels, b.out_channels), (1, 2));
        } else {
            assert_eq!(a.out_channels, b.out_channels);
        }
    }
    assert_eq!(stages.iter().filter(|s| s.name == "bottleneck").count(), 1);
}

#[test]
fn siamese_fuses_at_bottleneck() {
    let cfg = BackboneConfig::default();
    let siamese = build_model(ModelVariant::SiameseLateFusion, &cfg).unwrap();
    let early = build_model(ModelVariant::LongitudinalEarlyFusion, &cfg).unwrap();
    let s = siamese.stages();
    let e = early.stages();
    let first = |v: &[Stage]| v.iter().find(|s| s.name == "first_conv").unwrap().clone();
    assert_eq!(first(&s).in_channels, 2);
    assert_eq!(first(&e).in_channels, 4);
    let last_down = |v: &[Stage]| {
        v.iter()
            .rfind(|s| s.name.starts_with("transition_down"))
            .unwrap()
            .out_channels
    };
    let bottleneck = |v: &[Stage]| {
        v.iter()
            .find(|s| s.name == "bottleneck")
            .unwrap()
            .in_channels
    };
    assert_eq!(bottleneck(&s), 2 * last_down(&s));
    assert_eq!(bottleneck(&e), last_down(&e));

    let m = build_model(ModelVariant::SiameseLateFusion, &tiny()).unwrap();
    m.forward(&random_input((1, 4, 8, 8), 6, DType::F32), &mut Mode::Eval)
        .unwrap();
    assert_eq!(m.encoder_calls(), 2, "one shared down-path per time point");
}

#[test]
fn siamese_double_swap_is_identity() {
    let m = build_model(ModelVariant::SiameseLateFusion, &tiny()).unwrap();
    let x = random_input((1, 4, 8, 8), 7, DType::F32);
    let swap = |t: &Tensor| {
        Tensor::cat(&[t.narrow(1, 2, 2).unwrap(), t.narrow(1, 0, 2).unwrap()], 1).unwrap()
    };
    let back = swap(&swap(&x));
    let a = m
        .forward(&x, &mut Mode::Eval)
        .unwrap()
        .prob
        .flatten_all()
        .unwrap()
        .to_vec1::<f32>()
        .unwrap();
    let b = m
        .forward(&back, &mut Mode::Eval)
        .unwrap()
        .prob
        .flatten_all()
        .unwrap()
        .to_vec1::<f32>()
        .unwrap();
    assert_eq!(a, b);
}

#[test]
fn translation_covariance_in_interior() {
    let cfg = BackboneConfig {
        layers_per_dense_block: 2,
        bottleneck_layers: 2,
        n_pool: 2,
        ..tiny()
    };
    for variant in [ModelVariant::Static, ModelVariant::SiameseLateFusion] {
        let m = Model::new(
            variant,
            &cfg,
            InitOptions {
                seed: 9,
                dtype: DType::F64,
            },
        )
        .unwrap();
        let c = variant.input_channels();
        let size = 128;
        let shift = m.downsampling_factor();
        let x = random_input((1, c, size, size), 8, DType::F64);
        // Shift down and right; the vacated border is filled with the wrapped rows.
        let xs = Tensor::cat(
            &[
                x.narrow(2, size - shift, shift).unwrap(),
                x.narrow(2, 0, size - shift).unwrap(),
            ],
            2,
        )
        .unwrap();
        let xs = Tensor::cat(
            &[
                xs.narrow(3, size - shift, shift).unwrap(),
                xs.narrow(3, 0, size - shift).unwrap(),
            ],
            3,
        )
        .unwrap();
        let p = tensor_to_array4(&m.forward(&x, &mut Mode::Eval).unwrap().prob).unwrap();
        let ps = tensor_to_array4(&m.forward(&xs, &mut Mode::Eval).unwrap().prob).unwrap();
        let mut worst = 0.0f32;
        for i in 40..88 {
            for j in 40..88 {
                worst = worst.max((p[[0, 0, i, j]] - ps[[0, 0, i + shift, j + shift]]).abs());
            }
        }
        assert!(worst < 1e-5, "{variant}: {worst}");
    }
}

/// Every trainable weight of a tiny model, against central differences of
/// a scalar loss at 64-bit precision.
fn weight_gradcheck(variant: ModelVariant) -> GradcheckReport {
    let model = Model::new(
        variant,
        &tiny(),
        InitOptions {
            seed: 11,
            dtype: DType::F64,
        },
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    // The field head starts at zero; randomize it so its gradient path is exercised.
    for p in model.params().trainable() {
        if p.name.starts_with("field_decoder.head") {
            let n = p.var.elem_count();
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
            p.var
                .set(&Tensor::from_vec(v, p.var.shape(), &Device::Cpu).unwrap())
                .unwrap();
        }
    }
    let c = variant.input_channels();
    let x = random_input((2, c, 8, 8), 13, DType::F64);
    let target = random_input((2, 1, 8, 8), 14, DType::F64);
    let field_target = random_input((2, 2, 8, 8), 15, DType::F64);
    let loss = |m: &Model| -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let out = m.forward(&x, &mut Mode::Train(&mut r)).unwrap();
        let mut l = out
            .prob
            .sub(&target)
            .unwrap()
            .sqr()
            .unwrap()
            .mean_all()
            .unwrap();
        if let Some(f) = out.field {
            l = l
                .add(
                    &f.sub(&field_target)
                        .unwrap()
                        .sqr()
                        .unwrap()
                        .mean_all()
                        .unwrap(),
                )
                .unwrap();
        }
        l
    };
    let grads = loss(&model).backward().unwrap();
    let mut report = GradcheckReport::default();
    for p in model.params().trainable() {
        let analytic = grads
            .get(p.var.as_tensor())
            .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap())
            .unwrap_or_else(|| vec![0.0; p.var.elem_count()]);
        let base = p.var.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let shape = p.var.shape().clone();
        for i in 0..base.len() {
            let mut probe = base.clone();
            let mut eval = |delta: f64| {
                probe[i] = base[i] + delta;
                p.var
                    .set(&Tensor::from_vec(probe.clone(), &shape, &Device::Cpu).unwrap())
                    .unwrap();
                loss(&model).to_scalar::<f64>().unwrap()
            };
            let numeric = (eval(DEFAULT_STEP) - eval(-DEFAULT_STEP)) / (2.0 * DEFAULT_STEP);
            p.var
                .set(&Tensor::from_vec(base.clone(), &shape, &Device::Cpu).unwrap())
                .unwrap();
            report.record(&p.name, i, analytic[i], numeric);
        }
    }
    report
}

#[test]
fn weight_gradients_match_finite_differences() {
    for variant in [
        ModelVariant::MultitaskLongitudinal,
        ModelVariant::SiameseLateFusion,
    ] {
        let r = weight_gradcheck(variant);
        assert!(r.n_checked > 300, "{}", r.n_checked);
        assert!(r.passed(), "{variant}: {:?}", r.worst);
        assert!(r.max_rel_error < TOLERANCE);
    }
}

#[test]
fn checkpoint_roundtrip_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let m = Model::new(
        ModelVariant::Static,
        &tiny(),
        InitOptions {
            seed: 3,
            dtype: DType::F32,
        },
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let _: u64 = rng.random();
    let ckpt = Checkpoint::from_model(&m, 2, 40, Some(&rng));
    ckpt.save(dir.path()).unwrap();
    let loaded = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(loaded.meta, ckpt.meta);
    let restored = Model::from_checkpoint(&loaded).unwrap();
    let x = random_input((1, 2, 8, 8), 1, DType::F32);
    let a = m
        .forward(&x, &mut Mode::Eval)
        .unwrap()
        .prob
        .flatten_all()
        .unwrap()
        .to_vec1::<f32>()
        .unwrap();
    let b = restored
        .forward(&x, &mut Mode::Eval)
        .unwrap()
        .prob
        .flatten_all()
        .unwrap()
        .to_vec1::<f32>()
        .unwrap();
    assert_eq!(a, b);
    let mut r2 = loaded.meta.rng.as_ref().unwrap().restore().unwrap();
    assert_eq!(r2.random::<u64>(), rng.random::<u64>());

    let other = build_model(
        ModelVariant::Static,
        &BackboneConfig {
            growth_rate: 3,
            ..tiny()
        },
    )
    .unwrap();
    assert!(matches!(
        other.load_checkpoint(&loaded),
        Err(NetError::Checkpoint(_))
    ));
    let wrong_variant = build_model(ModelVariant::SiameseLateFusion, &tiny()).unwrap();
    assert!(wrong_variant.load_checkpoint(&loaded).is_err());
}

#[test]
fn predict_splits_batch() {
    use crate::volumes::{CropRecord, SlicePlane, SliceStack};
    let m = build_model(ModelVariant::MultitaskLongitudinal, &tiny()).unwrap();
    let stack = |v: f32| SliceStack {
        data: ndarray::Array3::from_elem((4, 8, 6), v),
        layout: Layout::Longitudinal,
        plane: SlicePlane::Axial,
        index: 0,
        subject_id: "s".into(),
        crop: CropRecord {
            height: 8,
            width: 6,
        },
    };
    let preds = m.predict(&[stack(0.0), stack(1.0)]).unwrap();
    assert_eq!(preds.len(), 2);
    assert_eq!(preds[0].prob.dim(), (8, 6));
    assert_eq!(preds[1].field.as_ref().unwrap().data.dim(), (2, 8, 6));
}
