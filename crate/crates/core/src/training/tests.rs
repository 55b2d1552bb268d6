use super::*;
use crate::fields::{AnalyticField, Shape};
use crate::metrics;
use crate::mise::{extract_mesh, ExtractionConfig};
use crate::mesh_refine::RefineConfig;
use crate::neural::{Activation, DecoderConfig, DecoderField};
use crate::sampling::sample_uniform_in;

fn sphere_item(r: f64) -> TrainItem {
    TrainItem::new(Arc::new(AnalyticField::sphere(Point3::zeros(), r).unwrap()), Observation::ShapeId(0))
}

fn small_decoder(seed: u64, cond: usize) -> DecoderParams {
    let config = DecoderConfig {
        hidden: 32,
        condition_dim: cond,
        ..DecoderConfig::default()
    };
    DecoderParams::new(config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn quick_config(seed: u64, steps: usize) -> TrainConfig {
    TrainConfig {
        points: 512,
        batch_size: 4,
        learning_rate: 1e-3,
        max_steps: steps,
        validation_interval: 50,
        seed,
        ..TrainConfig::default()
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

#[test]
fn bce_reference_values() {
    let (l, _) = bce_loss(&[0.0], &[1.0]).unwrap();
    assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    let (l, g) = bce_loss(&[40.0], &[1.0]).unwrap();
    assert!(l >= 0.0 && l < 1e-15 && g[0].abs() < 1e-15);
    let (l, g) = bce_loss(&[-800.0, 800.0], &[1.0, 0.0]).unwrap();
    assert!((l - 800.0).abs() < 1e-9, "{l}");
    assert!(g.iter().all(|v| v.is_finite()));
    assert!(bce_loss(&[0.0], &[0.5]).is_err());
    assert!(bce_loss(&[0.0, 1.0], &[1.0]).is_err());
}

#[test]
fn bce_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits: Vec<f64> = (0..20).map(|_| rng.random_range(-6.0..6.0)).collect();
    let labels: Vec<f64> = (0..20).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let (_, g) = bce_loss(&logits, &labels).unwrap();
    let h = 1e-5;
    for i in 0..logits.len() {
        let mut up = logits.clone();
        up[i] += h;
        let mut dn = logits.clone();
        dn[i] -= h;
        let fd = (bce_loss(&up, &labels).unwrap().0 - bce_loss(&dn, &labels).unwrap().0) / (2.0 * h);
        assert!(rel_err(g[i], fd) < 1e-6, "{i}: {} vs {fd}", g[i]);
    }
}

#[test]
fn kl_reference_values_and_gradient() {
    assert_eq!(kl_diag_gaussian(&[0.0, 0.0], &[0.0, 0.0]).unwrap().0, 0.0);
    let (kl, _, _) = kl_diag_gaussian(&[1.0, 0.0], &[0.0, 0.0]).unwrap();
    assert!((kl - 0.5).abs() < 1e-15);
    assert!(kl_diag_gaussian(&[0.0], &[]).is_err());

    let mu = [0.3, -1.2, 0.05];
    let ls = [-0.4, 0.7, 0.0];
    let (_, dmu, dls) = kl_diag_gaussian(&mu, &ls).unwrap();
    let h = 1e-6;
    for i in 0..3 {
        let shift = |v: &[f64; 3], d: f64| {
            let mut w = *v;
            w[i] += d;
            w
        };
        let fd_mu = (kl_diag_gaussian(&shift(&mu, h), &ls).unwrap().0 - kl_diag_gaussian(&shift(&mu, -h), &ls).unwrap().0)
            / (2.0 * h);
        let fd_ls = (kl_diag_gaussian(&mu, &shift(&ls, h)).unwrap().0 - kl_diag_gaussian(&mu, &shift(&ls, -h)).unwrap().0)
            / (2.0 * h);
        assert!(rel_err(dmu[i], fd_mu) < 1e-6);
        // d/dls is zero at ls = 0; compare absolutely there.
        assert!(rel_err(dls[i], fd_ls) < 1e-6 || (dls[i] - fd_ls).abs() < 1e-9);
    }
}

#[test]
fn adam_first_step_has_learning_rate_length() {
    let mut t = Tensor2::from_vec(1, 2, vec![1.0, -2.0]).unwrap();
    t.grad = vec![0.3, -50.0];
    let mut adam = Adam::new(0.01);
    adam.step(vec![&mut t]);
    assert!((t.data[0] - 0.99).abs() < 1e-9);
    assert!((t.data[1] + 1.99).abs() < 1e-9);
    // Converges on a quadratic bowl.
    for _ in 0..3000 {
        t.grad = t.data.iter().map(|x| 2.0 * (x - 0.5)).collect();
        adam.step(vec![&mut t]);
    }
    assert!(t.data.iter().all(|x| (x - 0.5).abs() < 1e-3), "{:?}", t.data);
}

#[test]
fn config_json_round_trip_and_validation() {
    let cfg = quick_config(3, 10);
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(TrainConfig::from_json(&text).unwrap(), cfg);
    assert_eq!(TrainConfig::from_json("{}").unwrap(), TrainConfig::default());
    let err = TrainConfig::from_json(r#"{"strategy": "random"}"#).unwrap_err().to_string();
    assert!(err.contains("random"), "{err}");
    assert!(TrainConfig::from_json(r#"{"pionts": 3}"#).is_err());
    let err = TrainConfig::from_json(r#"{"tau_grid": [0.2, 1.0]}"#).unwrap_err().to_string();
    assert!(err.contains("tau_grid"), "{err}");
    let err = TrainConfig::from_json(r#"{"batch_size": 0}"#).unwrap_err().to_string();
    assert!(err.contains("batch_size"), "{err}");
    assert!(TrainConfig::default().tau_grid.contains(&0.2));
}

#[test]
fn zero_steps_leave_parameters_unchanged() {
    let dec = small_decoder(1, 8);
    let enc = EncoderParams::latent_table(1, 8, &mut ChaCha8Rng::seed_from_u64(2));
    let ds = Dataset::new(vec![sphere_item(0.4)]).unwrap();
    let out = train_field(dec.clone(), enc.clone(), &ds, &quick_config(0, 0)).unwrap();
    assert_eq!(out.decoder, dec);
    assert_eq!(out.encoder, enc);
    assert!(out.record.rows.is_empty());
}

#[test]
fn training_is_bit_reproducible() {
    let ds = Dataset::new(vec![sphere_item(0.4)]).unwrap();
    for strategy in Strategy::ALL {
        let run = || {
            let enc = EncoderParams::latent_table(1, 8, &mut ChaCha8Rng::seed_from_u64(2));
            let cfg = TrainConfig {
                strategy,
                ..quick_config(5, 20)
            };
            train_field(small_decoder(1, 8), enc, &ds, &cfg).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.decoder, b.decoder);
        assert_eq!(a.encoder, b.encoder);
        assert_eq!(a.record, b.record);
    }
}

#[test]
fn divergence_is_reported() {
    let ds = Dataset::new(vec![sphere_item(0.4)]).unwrap();
    let enc = EncoderParams::latent_table(1, 8, &mut ChaCha8Rng::seed_from_u64(2));
    let cfg = TrainConfig {
        learning_rate: 1e300,
        ..quick_config(0, 50)
    };
    let err = train_field(small_decoder(1, 8), enc, &ds, &cfg).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err}");
}

#[test]
fn encoder_kind_is_checked() {
    let ds = Dataset::new(vec![sphere_item(0.4)]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let vae = EncoderParams::variational(8, 8, &mut rng);
    assert!(matches!(
        train_field(small_decoder(1, 8), vae, &ds, &quick_config(0, 1)),
        Err(Error::KindMismatch { .. })
    ));
    let table = EncoderParams::latent_table(1, 8, &mut rng);
    assert!(matches!(
        train_generative(small_decoder(1, 8), table, &ds, &quick_config(0, 1)),
        Err(Error::KindMismatch { .. })
    ));
}

fn extraction_iou(out: &TrainOutcome, ds: &Dataset, cfg: &TrainConfig, gt: &AnalyticField) -> (f64, f64) {
    let val = ValidationSet::new(ds, cfg).unwrap();
    let tau = select_tau(&out.decoder, &out.encoder, ds, &val, &cfg.tau_grid).unwrap();
    let cond = condition_for(&out.encoder, ds, &val, 0).unwrap();
    let field = DecoderField::new(Arc::new(out.decoder.clone()), cond, ds.region).unwrap();
    let ext = ExtractionConfig::new(ds.region).with_tau(tau).with_resolution(32, 1);
    let (mesh, _) = extract_mesh(&field, &ext, &RefineConfig::none()).unwrap();
    let solid = crate::fields::MeshField::new(mesh).unwrap();
    let iou = metrics::volumetric_iou(&solid, gt, 100_000, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    (iou, tau)
}

#[test]
fn single_sphere_is_learned_from_two_seeds() {
    let gt = AnalyticField::sphere(Point3::zeros(), 0.4).unwrap();
    let ds = Dataset::new(vec![sphere_item(0.4)]).unwrap();
    let mut decoders = Vec::new();
    for seed in [11, 12] {
        let enc = EncoderParams::latent_table(1, 8, &mut ChaCha8Rng::seed_from_u64(seed));
        let cfg = quick_config(seed, 1000);
        let out = train_field(small_decoder(seed, 8), enc, &ds, &cfg).unwrap();

        // The returned checkpoint is the best one evaluated.
        let best = out.record.rows.iter().map(|r| r.val_iou).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.record.best_val_iou, Some(best));
        let val = ValidationSet::new(&ds, &cfg).unwrap();
        let again = validation_iou(&out.decoder, &out.encoder, &ds, &val, VALIDATION_TAU).unwrap();
        assert_eq!(again, best);
        assert!(out.record.rows.windows(2).all(|w| w[0].step < w[1].step));

        let (iou, tau) = extraction_iou(&out, &ds, &cfg, &gt);
        assert!(iou >= 0.95, "seed {seed}: iou {iou} at tau {tau}");

        // Threshold search agrees with a ten times finer grid.
        let fine: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
        let curve = tau_curve(&out.decoder, &out.encoder, &ds, &val, &fine).unwrap();
        let argmax = curve.iter().fold((0.0, f64::NEG_INFINITY), |b, &(t, v)| if v > b.1 { (t, v) } else { b }).0;
        assert!((tau - argmax).abs() <= 0.1 + 1e-9, "{tau} vs {argmax}");
        decoders.push(out.decoder);
    }
    assert_ne!(decoders[0], decoders[1]);
}

#[test]
fn patience_stops_early() {
    let ds = Dataset::new(vec![sphere_item(0.4)]).unwrap();
    let enc = EncoderParams::latent_table(1, 8, &mut ChaCha8Rng::seed_from_u64(2));
    let cfg = TrainConfig {
        validation_interval: 5,
        patience: Some(1),
        learning_rate: 1e-7,
        ..quick_config(0, 400)
    };
    let out = train_field(small_decoder(1, 8), enc, &ds, &cfg).unwrap();
    assert!(out.record.rows.last().unwrap().step < 400);
}

#[test]
fn select_tau_breaks_ties_toward_smaller() {
    // A zero head predicts 0.5 everywhere.
    let dec = small_decoder(1, 8);
    let enc = EncoderParams::latent_table(1, 8, &mut ChaCha8Rng::seed_from_u64(2));
    let ds = Dataset::new(vec![sphere_item(0.4)]).unwrap();
    let val = ValidationSet::new(&ds, &quick_config(0, 1)).unwrap();
    assert_eq!(select_tau(&dec, &enc, &ds, &val, &[0.4, 0.3, 0.45]).unwrap(), 0.3);
    assert_eq!(select_tau(&dec, &enc, &ds, &val, &[0.7]).unwrap(), 0.7);
    assert!(select_tau(&dec, &enc, &ds, &val, &[]).is_err());
}

#[test]
fn doubling_points_halves_loss_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let config = DecoderConfig {
        hidden: 16,
        condition_dim: 4,
        activation: Activation::Softplus,
        ..DecoderConfig::default()
    };
    let mut dec = DecoderParams::new(config, &mut rng).unwrap();
    for v in dec.fc_out.weight.data.iter_mut() {
        *v = rng.random_range(-2.0..2.0);
    }
    let field = AnalyticField::sphere(Point3::zeros(), 0.4).unwrap();
    let region = field.bbox().padded(DEFAULT_PADDING);
    let cond = [0.1, -0.2, 0.3, 0.0];
    let variance = |k: usize, rng: &mut ChaCha8Rng| {
        let losses: Vec<f64> = (0..100)
            .map(|_| {
                let b = sample_uniform_in(&field, &region, k, rng).unwrap();
                let logits = dec.forward_points(&b.points, &cond).unwrap();
                bce_loss(&logits, &b.occupancies).unwrap().0
            })
            .collect();
        let m = losses.iter().sum::<f64>() / 100.0;
        losses.iter().map(|l| (l - m).powi(2)).sum::<f64>() / 99.0
    };
    let ratio = variance(256, &mut rng) / variance(512, &mut rng);
    assert!((1.4..2.8).contains(&ratio), "{ratio}");
}

#[test]
fn kl_ramp() {
    let cfg = TrainConfig {
        kl_anneal: true,
        kl_weight: 2.0,
        ..quick_config(0, 100)
    };
    assert_eq!(kl_weight_at(&cfg, 10), 1.0);
    assert_eq!(kl_weight_at(&cfg, 20), 2.0);
    assert_eq!(kl_weight_at(&cfg, 90), 2.0);
    assert_eq!(kl_weight_at(&quick_config(0, 100), 1), 1.0);
}

fn toy_generative() -> (Dataset, DecoderParams, EncoderParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let items = vec![
        TrainItem::new(Arc::new(AnalyticField::sphere(Point3::zeros(), 0.35).unwrap()), Observation::Sampled),
        TrainItem::new(
            Arc::new(AnalyticField::new(Shape::cuboid(BoundingBox::cube(0.3))).unwrap()),
            Observation::Sampled,
        ),
    ];
    let enc = EncoderParams::variational(16, 4, &mut rng);
    (Dataset::new(items).unwrap(), small_decoder(4, 4), enc)
}

#[test]
fn fixed_noise_reproduces_the_bound() {
    let (ds, mut dec, mut enc) = toy_generative();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batches: Vec<SampleBatch> = ds
        .items
        .iter()
        .map(|i| sample_uniform_in(i.field.as_ref(), &ds.region, 64, &mut rng).unwrap())
        .collect();
    let noise = vec![vec![0.5, -1.0, 0.2, 0.0]; 2];
    let (a, _) = generative_step(&mut dec, &mut enc, &batches, &noise, 1.0).unwrap();
    let (b, _) = generative_step(&mut dec, &mut enc, &batches, &noise, 1.0).unwrap();
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    assert!((a.loss - a.bce - a.kl).abs() < 1e-12);
    assert!(generative_step(&mut dec, &mut enc, &batches, &noise[..1], 1.0).is_err());
}

#[test]
fn generative_step_gradient_matches_differences() {
    let (ds, dec, enc) = toy_generative();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batches: Vec<SampleBatch> = ds
        .items
        .iter()
        .map(|i| sample_uniform_in(i.field.as_ref(), &ds.region, 32, &mut rng).unwrap())
        .collect();
    let noise = vec![vec![0.5, -1.0, 0.2, 0.3], vec![-0.1, 0.4, 1.1, -0.7]];
    let mut dec = dec;
    for v in dec.fc_out.weight.data.iter_mut() {
        *v = rng.random_range(-0.5..0.5);
    }
    let loss = |d: &DecoderParams, e: &EncoderParams| {
        let (mut d, mut e) = (d.clone(), e.clone());
        generative_step(&mut d, &mut e, &batches, &noise, 0.7).unwrap().0.loss
    };
    let (mut d, mut e) = (dec.clone(), enc.clone());
    d.zero_grad();
    e.zero_grad();
    generative_step(&mut d, &mut e, &batches, &noise, 0.7).unwrap();
    let h = 1e-6;
    let grads: Vec<Vec<f64>> = e.tensors().iter().map(|t| t.grad.clone()).collect();
    let mut worst: f64 = 0.0;
    let gmax = grads.iter().flatten().fold(0.0f64, |m, g| m.max(g.abs()));
    for (ti, g) in grads.iter().enumerate() {
        for j in (0..g.len()).step_by(7) {
            let shift = |delta: f64| {
                let mut e2 = enc.clone();
                e2.tensors_mut()[ti].data[j] += delta;
                loss(&dec, &e2)
            };
            let fd = (shift(h) - shift(-h)) / (2.0 * h);
            let err = (g[j] - fd).abs() / g[j].abs().max(fd.abs()).max(1e-6 * gmax);
            worst = worst.max(err);
        }
    }
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn heavy_kl_collapses_to_the_prior() {
    let (ds, dec, enc) = toy_generative();
    let cfg = TrainConfig {
        kl_weight: 1e4,
        points: 128,
        batch_size: 2,
        learning_rate: 3e-3,
        max_steps: 400,
        validation_interval: 100,
        ..TrainConfig::default()
    };
    let out = train_generative(dec, enc, &ds, &cfg).unwrap();
    let val = ValidationSet::new(&ds, &cfg).unwrap();
    for b in &val.encoder_inputs {
        let e = out
            .encoder
            .encode(EncoderInput::Labeled {
                points: &b.points,
                occupancies: &b.occupancies,
            })
            .unwrap();
        let Encoding::Gaussian { mu, log_sigma } = e else { panic!() };
        assert!(mu.iter().all(|m| m.abs() < 0.05), "{mu:?}");
        assert!(log_sigma.iter().all(|s| s.abs() < 0.05), "{log_sigma:?}");
    }
}

#[test]
fn ablation_grid_has_one_cell_per_pair() {
    let corpus = Corpus::from_shapes(desk_shapes().into_iter().take(2).collect(), 24).unwrap();
    let cfg = ProtocolConfig {
        train: TrainConfig {
            points: 64,
            batch_size: 2,
            max_steps: 2,
            validation_points: 500,
            ..TrainConfig::default()
        },
        decoder: DecoderConfig {
            hidden: 8,
            condition_dim: 4,
            blocks: 1,
            ..DecoderConfig::default()
        },
        initial_resolution: 8,
        levels: 0,
        metric_samples: 500,
        ..ProtocolConfig::default()
    };
    let rows = run_protocol(ProtocolKind::Ablation, &corpus, &cfg).unwrap();
    assert_eq!(rows.len(), 9 * 3);
    assert_eq!(rows.iter().filter(|r| r.shape == "mean").count(), 9);
    assert!(rows.iter().all(|r| r.tau == 0.5));
    let cells: std::collections::HashSet<_> = rows.iter().map(|r| (r.strategy, r.arch)).collect();
    assert_eq!(cells.len(), 9);

    let one = ProtocolConfig {
        strategies: vec![Strategy::Uniform],
        archs: vec![Arch::Full],
        ..cfg
    };
    assert_eq!(run_protocol(ProtocolKind::Ablation, &corpus, &one).unwrap().len(), 3);
    for kind in [ProtocolKind::Pointcloud, ProtocolKind::VoxelSr, ProtocolKind::Generative] {
        let rows = run_protocol(kind, &corpus, &one).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].input_iou.is_some(), kind == ProtocolKind::VoxelSr);
    }
}
