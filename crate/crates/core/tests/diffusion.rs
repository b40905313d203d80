use std::sync::OnceLock;

use partlatent::diffusion::{
    complete, encode_shape, evaluate_loss, is_structurally_valid, leading_half, loss_and_gradients, make_batch,
    part_row, refine_dims, renoise_and_resample, sample, sample_one, train, ModelOptions, ShapeLatent, ShapeModel,
    TrainConfig,
};
use partlatent::ssm::fit_ssm;
use partlatent::synthetic::{generate_dataset, Dataset, FamilyConfig};
use partlatent::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Fixture {
    data: Dataset,
    model: ShapeModel,
    latents: Vec<ShapeLatent>,
}

fn tiny_options(steps: usize) -> ModelOptions {
    ModelOptions {
        model_dim: 16,
        blocks: 1,
        heads: 2,
        time_dim: 8,
        ff_mult: 2,
        diffusion_steps: steps,
        ..ModelOptions::default()
    }
}

fn build(steps: usize) -> Fixture {
    let family = FamilyConfig {
        points_per_part: 32,
        ..FamilyConfig::default()
    };
    let data = generate_dataset(&family, 60, 11).unwrap().dataset;
    let ssms: Vec<_> = data
        .categories
        .iter()
        .map(|c| fit_ssm(&data.parts_of(c.id), 8).unwrap().ssm)
        .collect();
    let names = data.categories.iter().map(|c| c.name.clone()).collect();
    let model = ShapeModel::new(names, ssms, tiny_options(steps), 2).unwrap();
    let latents = data
        .shapes
        .iter()
        .map(|s| encode_shape(&model.layout, &model.codebook, &model.ssms, s).unwrap())
        .collect();
    Fixture { data, model, latents }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| build(10))
}

#[test]
fn encoded_data_is_valid_and_decodes_back() {
    let f = fixture();
    for (shape, latent) in f.data.shapes.iter().zip(&f.latents) {
        assert!(is_structurally_valid(&f.model.layout, &f.model.codebook, latent));
        let back = partlatent::diffusion::decode_shape(&f.model.layout, &f.model.codebook, &f.model.ssms, latent, "x")
            .unwrap();
        assert_eq!(back.parts.len(), shape.parts.len());
        for (a, b) in back.parts.iter().zip(&shape.parts) {
            assert_eq!(a.category, b.category);
        }
    }
}

#[test]
fn validity_rejects_duplicates_and_missing_seat() {
    let f = fixture();
    let (layout, cb) = (&f.model.layout, &f.model.codebook);
    let mut latent = f.latents[0].clone();
    latent.rows[1] = latent.rows[0].clone();
    latent.mask[1] = true;
    assert!(!is_structurally_valid(layout, cb, &latent));

    let mut latent = ShapeLatent::empty(layout, cb);
    latent.rows[2] = part_row(layout, cb, 2, &vec![0.0; layout.geometry_dims[2]]).unwrap();
    latent.mask[2] = true;
    assert!(!is_structurally_valid(layout, cb, &latent));
    latent.rows[3] = part_row(layout, cb, 0, &vec![0.0; layout.geometry_dims[0]]).unwrap();
    latent.mask[3] = true;
    assert!(is_structurally_valid(layout, cb, &latent));

    assert!(matches!(
        part_row(layout, cb, 9, &[0.0]),
        Err(Error::UnknownCategory(9))
    ));
    assert!(matches!(part_row(layout, cb, 0, &[0.0]), Err(Error::ShapeMismatch(_))));
}

#[test]
fn sampling_is_deterministic_per_item() {
    let model = &fixture().model;
    let a = sample(model, 3, 42).unwrap();
    let b = sample(model, 3, 42).unwrap();
    assert_eq!(a, b);
    assert_eq!(sample_one(model, 42, 2).unwrap(), a[2]);
    let c = sample(model, 3, 43).unwrap();
    assert_ne!(a, c);
    for l in &a {
        l.validate(&model.layout).unwrap();
    }
}

#[test]
fn single_step_chain_returns_the_prediction() {
    let f = build(1);
    let model = &f.model;
    let (m, w, gw) = (
        model.layout.m(),
        model.layout.row_width(),
        model.layout.geometry_width(),
    );
    let out = sample_one(model, 5, 0).unwrap();

    // Rebuild the starting state from the same item stream.
    let mut rng = partlatent::diffusion::item_rng(5, 0);
    let ab = model.schedule.alpha_bar(0);
    let padding = model.codebook.mean(model.codebook.padding_class()).unwrap().to_vec();
    let mut input = partlatent::Tensor32::zeros(m, w);
    for r in 0..m {
        for c in 0..w {
            let eps: f64 = rng.sample(rand_distr::StandardNormal);
            let v = if c < gw {
                eps
            } else {
                ab.sqrt() * padding[c - gw] + (1.0 - ab).sqrt() * eps
            };
            input.set(r, c, v as f32);
        }
    }
    let (geometry, _) = model.denoiser.predict(&input, &[0], m).unwrap();
    let classes = out.classes(&model.layout, &model.codebook).unwrap();
    for r in 0..m {
        if classes[r] < m {
            let q = model.layout.geometry_dims[classes[r]];
            for c in 0..q {
                assert_eq!(out.rows[r][c], geometry.get(r, c) as f64);
            }
        }
    }
}

#[test]
fn completion_holds_fixed_rows_bitwise() {
    let f = fixture();
    let model = &f.model;
    let source = &f.latents[0];
    let fixed = vec![(0, source.rows[0].clone())];
    let out = complete(model, &fixed, 3, 9).unwrap();
    assert_eq!(out.len(), 3);
    for l in &out {
        assert_eq!(l.rows[0], source.rows[0]);
        assert!(l.mask[0]);
    }
    assert_ne!(out[0].rows[1..], out[1].rows[1..]);
    assert_eq!(out, complete(model, &fixed, 3, 9).unwrap());
}

#[test]
fn completing_every_row_returns_the_input() {
    let f = fixture();
    let source = f.latents.iter().find(|l| l.real_rows() == 4).unwrap();
    let fixed: Vec<_> = source.rows.iter().cloned().enumerate().collect();
    let out = complete(&f.model, &fixed, 2, 1).unwrap();
    for l in out {
        assert_eq!(&l, source);
    }
}

#[test]
fn completion_rejects_bad_requests() {
    let f = fixture();
    let model = &f.model;
    let row = f.latents[0].rows[0].clone();
    assert!(complete(model, &[], 1, 0).is_err());
    assert!(complete(model, &[(7, row.clone())], 1, 0).is_err());
    assert!(complete(model, &[(0, row.clone()), (0, row.clone())], 1, 0).is_err());
    assert!(complete(model, &[(0, row.clone()), (1, row.clone())], 1, 0).is_err());
    assert!(matches!(
        complete(model, &[(0, row[1..].to_vec())], 1, 0),
        Err(Error::ShapeMismatch(_))
    ));
    let mut bad = row;
    bad[0] = f64::NAN;
    assert!(complete(model, &[(0, bad)], 1, 0).is_err());
}

#[test]
fn refinement_leaves_other_entries_untouched() {
    let f = fixture();
    let model = &f.model;
    let source = &f.latents[3];
    let dims = leading_half(model, 0).unwrap();
    let out = refine_dims(model, source, 0, &dims, 4, 17).unwrap();
    for r in 0..model.layout.m() {
        for c in 0..model.layout.row_width() {
            if r == 0 && dims.contains(&c) {
                continue;
            }
            assert_eq!(out.rows[r][c].to_bits(), source.rows[r][c].to_bits(), "row {r} col {c}");
        }
    }
    assert!(dims.iter().any(|&d| out.rows[0][d] != source.rows[0][d]));
    assert_eq!(out.mask, source.mask);
    assert_eq!(out, refine_dims(model, source, 0, &dims, 4, 17).unwrap());

    let steps = model.schedule.steps();
    assert!(refine_dims(model, source, 0, &dims, 0, 1).is_err());
    assert!(refine_dims(model, source, 0, &dims, steps, 1).is_err());
    assert!(refine_dims(model, source, 0, &[], 3, 1).is_err());
    assert!(refine_dims(model, source, 0, &[0, 0], 3, 1).is_err());
    assert!(refine_dims(model, source, 0, &[model.layout.geometry_width()], 3, 1).is_err());
    assert!(refine_dims(model, source, 4, &dims, 3, 1).is_err());
}

#[test]
fn renoising_is_deterministic() {
    let f = fixture();
    let a = renoise_and_resample(&f.model, &f.latents[..3], 5, 3).unwrap();
    assert_eq!(a, renoise_and_resample(&f.model, &f.latents[..3], 5, 3).unwrap());
    assert!(renoise_and_resample(&f.model, &f.latents[..3], 10, 3).is_err());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let f = fixture();
    let bytes = f.model.to_bytes();
    let back = ShapeModel::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(sample(&back, 2, 4).unwrap(), sample(&f.model, 2, 4).unwrap());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.plck");
    f.model.save(&path).unwrap();
    assert_eq!(ShapeModel::load(&path).unwrap().to_bytes(), bytes);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let bytes = fixture().model.to_bytes();
    assert!(matches!(
        ShapeModel::from_bytes(&bytes[..bytes.len() - 9]),
        Err(Error::Corrupt(_))
    ));
    assert!(matches!(ShapeModel::from_bytes(&bytes[..10]), Err(Error::Corrupt(_))));
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 2] ^= 1;
    assert!(matches!(ShapeModel::from_bytes(&flipped), Err(Error::Corrupt(_))));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(ShapeModel::from_bytes(&magic), Err(Error::Corrupt(_))));
    let mut version = bytes;
    version[4] = 99;
    assert!(matches!(
        ShapeModel::from_bytes(&version),
        Err(Error::VersionMismatch { found: 99, .. })
    ));
}

#[test]
fn mismatched_parts_are_rejected() {
    let f = fixture();
    let m = &f.model;
    let other = ShapeModel::new(m.category_names.clone(), m.ssms.clone(), tiny_options(6), 2).unwrap();
    let mixed = ShapeModel::from_parts(
        m.category_names.clone(),
        m.ssms.clone(),
        m.options,
        other.schedule.clone(),
        m.codebook.clone(),
        m.denoiser.clone(),
    );
    assert!(matches!(mixed, Err(Error::ConfigMismatch(_))));
    let wide = ModelOptions {
        model_dim: 32,
        ..m.options
    };
    let other = ShapeModel::new(m.category_names.clone(), m.ssms.clone(), wide, 2).unwrap();
    let mixed = ShapeModel::from_parts(
        m.category_names.clone(),
        m.ssms.clone(),
        m.options,
        m.schedule.clone(),
        m.codebook.clone(),
        other.denoiser.clone(),
    );
    assert!(matches!(mixed, Err(Error::ConfigMismatch(_))));
    assert!(matches!(m.expect_layout(&[1, 2]), Err(Error::ConfigMismatch(_))));
}

#[test]
fn learning_rate_schedule() {
    let c = TrainConfig {
        steps: 100,
        lr: 1e-3,
        warmup: 10,
        final_lr_fraction: 0.1,
        ..TrainConfig::default()
    };
    assert!((c.lr_at(0) - 1e-4).abs() < 1e-15);
    assert!((c.lr_at(9) - 1e-3).abs() < 1e-15);
    assert!((c.lr_at(10) - 1e-3).abs() < 1e-15);
    assert!((c.lr_at(99) - 1e-4).abs() < 2e-6);
    for s in 10..99 {
        assert!(c.lr_at(s + 1) <= c.lr_at(s));
    }
    assert!(TrainConfig { ema_decay: 1.0, ..c }.validate().is_err());
    assert!(TrainConfig { steps: 0, ..c }.validate().is_err());
    assert!(TrainConfig { lr: f64::NAN, ..c }.validate().is_err());
}

#[test]
fn training_reduces_loss_and_is_reproducible() {
    let f = fixture();
    let config = TrainConfig {
        steps: 120,
        batch_size: 16,
        lr: 3e-3,
        warmup: 10,
        ema_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut a = f.model.clone();
    let history = train(&mut a, &f.latents, &config, |_, _| {}).unwrap();
    assert_eq!(history.len(), 120);
    let first: f64 = history[..10].iter().map(|p| p.total).sum();
    let last: f64 = history[110..].iter().map(|p| p.total).sum();
    assert!(last < first, "{first} -> {last}");

    let mut b = f.model.clone();
    train(&mut b, &f.latents, &config, |_, _| {}).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());

    let mut c = f.model.clone();
    train(
        &mut c,
        &f.latents,
        &TrainConfig {
            ema_decay: 0.9,
            ..config
        },
        |_, _| {},
    )
    .unwrap();
    assert_ne!(a.to_bytes(), c.to_bytes());
    assert!(train(&mut c, &[], &config, |_, _| {}).is_err());
}

#[test]
fn loss_gradients_match_finite_differences() {
    let f = fixture();
    let mut denoiser = f.model.denoiser.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let picks: Vec<&ShapeLatent> = f.latents[..6].iter().collect();
    let batch = make_batch::<f64, _>(
        &f.model.layout,
        &f.model.codebook,
        &f.model.schedule,
        &picks,
        true,
        &mut rng,
    )
    .unwrap();
    let weights = f.model.options.weights;
    let (_, grads) = loss_and_gradients(&denoiser, &batch, &weights).unwrap();
    let flat: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();
    let h = 1e-5;
    for _ in 0..50 {
        let i = rng.random_range(0..flat.len());
        let v = denoiser.params().get_flat(i);
        denoiser.params_mut().set_flat(i, v + h);
        let up = evaluate_loss(&denoiser, &batch, &weights).unwrap().total;
        denoiser.params_mut().set_flat(i, v - h);
        let down = evaluate_loss(&denoiser, &batch, &weights).unwrap().total;
        denoiser.params_mut().set_flat(i, v);
        let numeric = (up - down) / (2.0 * h);
        let rel = (numeric - flat[i]).abs() / numeric.abs().max(flat[i].abs()).max(1e-6);
        assert!(rel < 1e-4, "param {i}: analytic {} numeric {numeric}", flat[i]);
    }
}
