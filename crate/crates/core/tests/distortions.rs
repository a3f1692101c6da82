use proptest::prelude::*;
use zwm_core::data::synth_image;
use zwm_core::distortions::*;
use zwm_core::image::Image;

fn textured() -> Image {
    Image::from_fn(128, 128, |y, x, c| {
        let (fy, fx) = (y as f32 / 128.0, x as f32 / 128.0);
        0.5 + 0.2 * (6.0 * fx + c as f32).sin() * (5.0 * fy).cos() + 0.1 * (17.0 * fx * fy).sin()
    })
}

fn psnr(a: &Image, b: &Image) -> f64 {
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.data().len() as f64;
    10.0 * (1.0 / mse).log10()
}

fn spec(d: Distortion, seed: u64) -> DistortionSpec {
    DistortionSpec::new(d, seed)
}

#[test]
fn identity_is_bit_exact() {
    let img = synth_image(4, 9);
    assert_eq!(apply_distortion(&img, &DistortionSpec::identity()).unwrap(), img);
}

#[test]
fn zero_rotation_is_identity() {
    let img = synth_image(0, 1);
    assert_eq!(rotate_preserving_content(&img, 0.0), img);
}

#[test]
fn rotation_90_matches_transpose_flip() {
    let img = synth_image(2, 5);
    let out = rotate_preserving_content(&img, 90.0);
    let n = 128;
    // np.rot90: out[i][j] = in[j][n-1-i]
    let oracle = Image::from_fn(n, n, |i, j, c| img.get(j, n - 1 - i, c));
    let max = out.data().iter().zip(oracle.data()).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
    assert!(max < 1e-5, "max deviation {max}");
}

#[test]
fn rotation_25_preserves_mass() {
    let img = textured();
    let out = rotate_preserving_content(&img, 25.0);
    let (a, b): (f64, f64) = (img.data().iter().map(|&v| v as f64).sum(), out.data().iter().map(|&v| v as f64).sum());
    assert!(((b - a) / a).abs() < 0.02, "relative mass change {}", (b - a) / a);
}

#[test]
fn rotation_25_keeps_source_corners_in_frame() {
    let t = 25f64.to_radians();
    let s = content_preserving_scale(128, 128, t);
    let (c, sn) = (t.cos(), t.sin());
    for (x, y) in [(-64.0, -64.0), (64.0, -64.0), (-64.0, 64.0), (64.0, 64.0)] {
        let (fx, fy): (f64, f64) = (s * (x * c + y * sn), s * (-x * sn + y * c));
        assert!(fx.abs() <= 64.0 + 1e-9 && fy.abs() <= 64.0 + 1e-9);
    }
    // and the scale is tight: some corner lands on the boundary
    let max = [(-64.0f64, -64.0f64), (64.0, -64.0)]
        .iter()
        .map(|&(x, y)| (s * (x * c + y * sn)).abs().max((s * (-x * sn + y * c)).abs()))
        .fold(0f64, f64::max);
    assert!((max - 64.0).abs() < 1e-9);
}

#[test]
fn salt_pepper_density_on_flat_gray() {
    let img = Image::filled(128, 128, 0.5);
    for seed in [1, 2, 3] {
        let out = apply_distortion(&img, &spec(Distortion::SaltPepper { density: 0.15 }, seed)).unwrap();
        let corrupted = out.data().chunks(3).filter(|p| p.iter().all(|&v| v == 0.0 || v == 1.0)).count();
        let frac = corrupted as f64 / (128.0 * 128.0);
        assert!((frac - 0.15).abs() <= 0.01, "seed {seed}: {frac}");
    }
}

#[test]
fn jpeg_quality_100_is_near_lossless() {
    let img = synth_image(5, 11);
    let out = jpeg_roundtrip(&img, 100).unwrap();
    assert!(psnr(&img, &out) >= 38.0, "{}", psnr(&img, &out));
}

#[test]
fn jpeg_low_quality_is_lossy() {
    let img = synth_image(6, 3);
    let out = jpeg_roundtrip(&img, 15).unwrap();
    let p = psnr(&img, &out);
    assert!(p.is_finite() && out != img);
}

#[test]
fn jpeg_flat_gray_survives_every_quality() {
    let img = Image::filled(128, 128, 0.5);
    for q in [1, 15, 50, 100] {
        let out = jpeg_roundtrip(&img, q).unwrap();
        let mse = out.data().iter().map(|v| ((v - 0.5) as f64).powi(2)).sum::<f64>() / out.data().len() as f64;
        let p = if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() };
        assert!(p >= 45.0, "q={q}: {p}");
    }
}

#[test]
fn jpeg_quality_domain_is_checked() {
    let img = Image::filled(8, 8, 0.5);
    assert!(matches!(
        apply_distortion(&img, &spec(Distortion::Jpeg { quality: 0 }, 0)),
        Err(DistortionError::Parameter(_))
    ));
    assert!(apply_distortion(&img, &spec(Distortion::Jpeg { quality: 101 }, 0)).is_err());
}

#[test]
fn training_samples_respect_limits_and_are_uniform() {
    let n = 10_000;
    let mut counts = std::collections::HashMap::new();
    let (mut max_rot, mut max_frac) = (0f64, 0f64);
    for s in 0..n {
        let sp = sample_training_distortion(s);
        assert_eq!(sp, sample_training_distortion(s));
        sp.validate(DistortionPhase::Training).unwrap();
        assert!(sp.distortion.is_training_kind());
        match sp.distortion {
            Distortion::Rotation { degrees } => max_rot = max_rot.max(degrees.abs()),
            Distortion::WidthShift { fraction }
            | Distortion::HeightShift { fraction }
            | Distortion::Shear { fraction }
            | Distortion::Zoom { fraction } => max_frac = max_frac.max(fraction.abs()),
            _ => {}
        }
        *counts.entry(sp.distortion.kind()).or_insert(0usize) += 1;
    }
    assert!(max_rot <= 15.0 && max_frac <= 0.15);
    assert_eq!(counts.len(), TRAINING_KINDS);
    let p = 1.0 / TRAINING_KINDS as f64;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for (k, c) in counts {
        assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sigma, "{k}: {c}");
    }
}

#[test]
fn training_phase_rejects_photometric_kinds() {
    let s = spec(Distortion::GaussianBlur { sigma: 1.5 }, 0);
    assert!(matches!(s.validate(DistortionPhase::Training), Err(DistortionError::Phase { .. })));
    let r = spec(Distortion::Rotation { degrees: 25.0 }, 0);
    assert!(r.validate(DistortionPhase::Training).is_err());
    assert!(r.validate(DistortionPhase::Testing).is_ok());
}

#[test]
fn suites_by_phase() {
    let train = photometric_suite(DistortionPhase::Training);
    assert!(train.iter().all(|s| s.distortion.is_training_kind()));
    let test = photometric_suite(DistortionPhase::Testing);
    assert!(test.iter().any(|s| s.distortion == Distortion::Jpeg { quality: 50 }));
    let img = synth_image(8, 2);
    for s in &test {
        s.validate(DistortionPhase::Testing).unwrap();
        let a = apply_distortion(&img, s).unwrap();
        assert_eq!((a.height(), a.width()), (128, 128));
        assert!(a.in_unit_range(), "{}", s.distortion.label());
        assert_eq!(a, apply_distortion(&img, s).unwrap(), "{}", s.distortion.label());
    }
}

#[test]
fn grid_json_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("grid.json");
    let grid = photometric_suite(DistortionPhase::Testing);
    save_grid(&path, &grid).unwrap();
    assert_eq!(load_grid(&path).unwrap(), grid);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let first = &v[1];
    assert_eq!(first["kind"], "rotation");
    assert_eq!(first["params"]["degrees"], -25.0);
    assert!(first["seed"].is_u64());
}

#[test]
fn grid_seed_defaults_to_zero() {
    let s: DistortionSpec = serde_json::from_str(r#"{"kind":"jpeg","params":{"quality":30}}"#).unwrap();
    assert_eq!(s, spec(Distortion::Jpeg { quality: 30 }, 0));
}

#[test]
fn hflip_twice_is_identity() {
    let img = synth_image(1, 4);
    let f = spec(Distortion::Hflip {}, 0);
    let twice = apply_distortion(&apply_distortion(&img, &f).unwrap(), &f).unwrap();
    assert_eq!(twice, img);
}

#[test]
fn integer_shift_moves_content() {
    let img = textured();
    let out = apply_distortion(&img, &spec(Distortion::WidthShift { fraction: 0.125 }, 0)).unwrap();
    for y in [0, 50, 127] {
        for x in 16..128 {
            assert!((out.get(y, x, 1) - img.get(y, x - 16, 1)).abs() < 1e-6);
        }
    }
}

#[test]
fn cutout_blacks_one_square() {
    let img = Image::filled(128, 128, 0.7);
    let out = apply_distortion(&img, &spec(Distortion::Cutout { fraction: 0.25 }, 7)).unwrap();
    let black = out.data().chunks(3).filter(|p| p[0] == 0.0).count();
    assert_eq!(black, 32 * 32);
}

fn any_image() -> impl Strategy<Value = Image> {
    (0usize..10, any::<u64>()).prop_map(|(l, s)| synth_image(l, s))
}

fn stochastic_or_geometric() -> impl Strategy<Value = DistortionSpec> {
    prop_oneof![
        (-180.0f64..180.0).prop_map(|d| Distortion::Rotation { degrees: d }),
        (-0.5f64..0.5).prop_map(|f| Distortion::Shear { fraction: f }),
        (0.0f64..0.3).prop_map(|s| Distortion::GaussianNoise { sigma: s }),
        (0.0f64..1.0).prop_map(|p| Distortion::SaltPepper { density: p }),
        (0.0f64..3.0).prop_map(|f| Distortion::Brightness { factor: f }),
        (-1.0f64..1.0).prop_map(|s| Distortion::Hue { shift: s }),
        (0.05f64..1.0).prop_map(|a| Distortion::Crop { area: a }),
    ]
    .prop_flat_map(|d| any::<u64>().prop_map(move |s| DistortionSpec::new(d.clone(), s)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn outputs_are_deterministic_and_in_range(img in any_image(), s in stochastic_or_geometric()) {
        let a = apply_distortion(&img, &s).unwrap();
        prop_assert!(a.in_unit_range());
        prop_assert_eq!(&a, &apply_distortion(&img, &s).unwrap());
    }

    #[test]
    fn training_samples_always_validate(seed in any::<u64>()) {
        let s = sample_training_distortion(seed);
        prop_assert!(s.validate(DistortionPhase::Training).is_ok());
    }
}
