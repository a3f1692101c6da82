mod common;

use common::{fd_vector, tiny_cfg};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zwm_core::data::synth_dataset;
use zwm_core::image::Image;
use zwm_core::models::Nets;
use zwm_core::zerowatermark::*;

fn extractor(seed: u64) -> FrozenExtractor {
    FrozenExtractor::new(Nets::<f32>::new(&tiny_cfg(), seed).unwrap())
}

fn image(seed: u64) -> Image {
    synth_dataset(1, seed).remove(0).image
}

fn feature_from(f: impl Fn(usize, usize, usize) -> f32) -> Vec<f32> {
    let mut v = Vec::with_capacity(128 * 128 * 3);
    for y in 0..128 {
        for x in 0..128 {
            for c in 0..3 {
                v.push(f(y, x, c));
            }
        }
    }
    v
}

proptest! {
    #[test]
    fn hex_round_trips(bits in proptest::collection::vec(any::<bool>(), 1..70)) {
        let m = WatermarkMessage::new(bits.clone()).unwrap();
        let hex = m.to_hex();
        prop_assert_eq!(hex.len(), bits.len().div_ceil(4));
        prop_assert_eq!(WatermarkMessage::from_hex(&hex, bits.len()).unwrap(), m.clone());
        prop_assert_eq!(WatermarkMessage::from_hex(&format!("0x{hex}"), bits.len()).unwrap(), m);
    }

    #[test]
    fn negating_c_complements_probabilities(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let c: Vec<f64> = (0..32).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let neg: Vec<f64> = c.iter().map(|v| -v).collect();
        for (p, q) in predict_bits(&f, &c).iter().zip(predict_bits(&f, &neg)) {
            prop_assert!((p - (1.0 - q)).abs() < 1e-12);
        }
    }
}

#[test]
fn hex_layout_and_validation() {
    let m = WatermarkMessage::new(vec![true, false, true, true, false, false]).unwrap();
    // 6 bits pad to 8 on the left: 0010_1100
    assert_eq!(m.to_hex(), "2c");
    assert_eq!(WatermarkMessage::ones(30).to_hex(), "3fffffff");
    assert!(WatermarkMessage::from_hex("7fffffff", 30).is_err());
    assert!(WatermarkMessage::from_hex("3ffffff", 30).is_err());
    assert!(WatermarkMessage::from_hex("3ffffffg", 30).is_err());
    assert!(WatermarkMessage::new(vec![]).is_err());
}

#[test]
fn digest_has_fixed_length_and_separates_messages() {
    let a = WatermarkMessage::random(30, 1);
    let b = WatermarkMessage::random(30, 2);
    assert_eq!(a.digest().len(), 64);
    assert_eq!(a.digest(), a.clone().digest());
    assert_ne!(a.digest(), b.digest());
    assert_ne!(WatermarkMessage::zeros(30).digest(), WatermarkMessage::zeros(31).digest());
}

#[test]
fn pooling_constant_feature() {
    let p = pool_feature(&vec![0.3f32; 128 * 128 * 3]);
    assert_eq!(p.len(), POOLED_DIM);
    assert!(p.iter().all(|&v| (v - 0.3f32 as f64).abs() < 1e-12));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let psi = Psi::init(16, &mut rng);
    let out = psi.apply(&p);
    for (j, &o) in out.iter().enumerate() {
        let row: f64 = psi.weight[j * POOLED_DIM..(j + 1) * POOLED_DIM].iter().map(|&w| w as f64).sum();
        assert!((o - (psi.bias[j] as f64 + 0.3f32 as f64 * row)).abs() < 1e-9);
    }
}

#[test]
fn projection_is_linear_in_the_unbiased_part() {
    let f = feature_from(|y, x, c| ((y * 31 + x * 17 + c * 5) % 23) as f32 / 23.0);
    let f2: Vec<f32> = f.iter().map(|v| v * 2.0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut psi = Psi::init(12, &mut rng);
    psi.bias.iter_mut().for_each(|b| *b = rng.gen_range(-1.0..1.0));
    let (a, b) = (project(&f, &psi), project(&f2, &psi));
    for j in 0..12 {
        let bias = psi.bias[j] as f64;
        assert!(((b[j] - bias) - 2.0 * (a[j] - bias)).abs() < 1e-9);
    }
}

#[test]
fn pooling_is_tile_local() {
    let f = feature_from(|y, x, c| ((y + 2 * x + 3 * c) % 7) as f32);
    let mut g = f.clone();
    // one pixel inside tile (ty 2, tx 5), channel 1
    g[((2 * 16 + 3) * 128 + 5 * 16 + 9) * 3 + 1] += 1.0;
    let (pf, pg) = (pool_feature(&f), pool_feature(&g));
    let diff: Vec<usize> = (0..POOLED_DIM).filter(|&i| pf[i] != pg[i]).collect();
    assert_eq!(diff, vec![(2 * 8 + 5) * 3 + 1]);
    assert!((pg[diff[0]] - pf[diff[0]] - 1.0 / 256.0).abs() < 1e-12);
}

#[test]
fn predict_bits_cases() {
    let f = vec![1.0, 0.0, 0.0];
    assert!(predict_bits(&f, &[0.0; 6]).iter().all(|&p| p == 0.5));
    let p = predict_bits(&f, &[10.0, 0.0, 0.0]);
    assert!((p[0] - 1.0 / (1.0 + (-10f64).exp())).abs() < 1e-15);
    assert!((p[0] - 0.99995).abs() < 1e-5);
}

#[test]
fn watermark_loss_cases() {
    let m = WatermarkMessage::random(30, 9);
    let hard: Vec<f64> = m.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let l = loss_watermark(&hard, &m);
    assert!(l >= 0.0 && l <= 30.0 * 1e-6, "{l}");
    let half = loss_watermark(&[0.5; 30], &m);
    assert!((half - 30.0 * std::f64::consts::LN_2).abs() < 1e-12);
    assert!((half - 20.79).abs() < 1e-2);
    // opposite targets hit the clamp instead of infinity
    let wrong: Vec<f64> = hard.iter().map(|v| 1.0 - v).collect();
    assert!((loss_watermark(&wrong, &m) - 30.0 * -(WM_PROB_CLAMP.ln())).abs() < 1e-6);
}

#[test]
fn signature_gradients_match_finite_differences() {
    let (k, d) = (4, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pooled: Vec<f64> = (0..POOLED_DIM).map(|_| rng.gen()).collect();
    let w: Vec<f64> = (0..d * POOLED_DIM).map(|_| rng.gen_range(-0.07..0.07)).collect();
    let b: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.1..0.1)).collect();
    let c: Vec<f64> = (0..k * d).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let m = WatermarkMessage::random(k, 12);
    let lc = 1e-2;
    let g = signature_loss_grad(&pooled, &w, &b, &c, &m, lc);
    let total = |w: &[f64], b: &[f64], c: &[f64]| signature_loss_grad(&pooled, w, b, c, &m, lc).loss_total;
    let err = fd_vector(&c, &g.c, 1e-5, 13, &mut |v| total(&w, &b, v));
    assert!(err < 1e-4, "C: {err}");
    let err = fd_vector(&w, &g.weight, 1e-5, 14, &mut |v| total(v, &b, &c));
    assert!(err < 1e-4, "W: {err}");
    let err = fd_vector(&b, &g.bias, 1e-5, 15, &mut |v| total(&w, v, &c));
    assert!(err < 1e-4, "b: {err}");
    let reg: f64 = c.iter().map(|v| v * v).sum();
    assert!((g.loss_total - g.loss_w - lc * reg).abs() < 1e-12);
}

#[test]
fn registration_recovers_the_message_on_the_clean_image() {
    let fe = extractor(1);
    for s in 0..5u64 {
        let img = image(100 + s);
        let msg = WatermarkMessage::random(30, s);
        let (rec, trace) = register(&fe, &img, &msg, &RegisterOptions { seed: s, ..Default::default() }).unwrap();
        assert_eq!(extract(&fe, &img, &rec).unwrap().message, msg);
        assert_eq!(trace.clean_accuracy, 1.0);
        assert!(trace.min_margin > 0.0);
        assert!(trace.epochs <= 50);
        assert_eq!(rec.extractor_checkpoint_id, fe.checkpoint_id());
        assert_eq!(rec.watermark_digest, msg.digest());
    }
}

#[test]
fn early_stop_reaches_the_margin() {
    let fe = extractor(1);
    let (_, trace) = register(&fe, &image(7), &WatermarkMessage::random(30, 7), &RegisterOptions::default()).unwrap();
    if trace.epochs < 50 {
        assert!(trace.min_margin >= 2.0 - 1e-4, "{trace:?}");
    }
}

#[test]
fn signature_loss_drops_over_fifty_epochs() {
    let fe = extractor(2);
    let opts = RegisterOptions { early_stop: false, ..Default::default() };
    for s in 0..5u64 {
        let (_, trace) = register(&fe, &image(200 + s), &WatermarkMessage::random(30, 50 + s), &opts).unwrap();
        assert_eq!(trace.loss_w.len(), 50);
        assert!(trace.loss_w[49] <= 0.1 * trace.loss_w[0], "{:?}", trace.loss_w);
        for w in trace.loss_w.chunks(5).collect::<Vec<_>>().windows(2) {
            let (a, b) = (w[0].iter().sum::<f64>(), w[1].iter().sum::<f64>());
            assert!(b <= a, "window mean rose: {a} -> {b}");
        }
    }
}

#[test]
fn zeros_and_ones_land_on_opposite_sides() {
    let fe = extractor(3);
    let img = image(5);
    let opts = RegisterOptions::default();
    let (r0, _) = register(&fe, &img, &WatermarkMessage::zeros(30), &opts).unwrap();
    let (r1, _) = register(&fe, &img, &WatermarkMessage::ones(30), &opts).unwrap();
    let p0 = extract(&fe, &img, &r0).unwrap().probs;
    let p1 = extract(&fe, &img, &r1).unwrap().probs;
    assert!(p0.iter().zip(&p1).all(|(a, b)| *a < 0.5 && *b > 0.5));
    assert_ne!(r0.record_id, r1.record_id);
}

#[test]
fn one_image_carries_many_watermarks() {
    let fe = extractor(4);
    let img = image(6);
    let msgs: Vec<WatermarkMessage> = (0..4).map(|i| WatermarkMessage::random(30, 300 + i)).collect();
    let recs: Vec<SignatureRecord> = msgs
        .iter()
        .enumerate()
        .map(|(i, m)| register(&fe, &img, m, &RegisterOptions { seed: i as u64, ..Default::default() }).unwrap().0)
        .collect();
    for (i, r) in recs.iter().enumerate() {
        assert_eq!(extract(&fe, &img, r).unwrap().message, msgs[i]);
    }
    // querying with record j recovers message j, never another record's bits
    assert_ne!(extract(&fe, &img, &recs[1]).unwrap().message, msgs[0]);
    let many = extract_many(&fe, &[&img, &img], &[&recs[2], &recs[3]]).unwrap();
    assert_eq!((many[0].message.clone(), many[1].message.clone()), (msgs[2].clone(), msgs[3].clone()));
}

#[test]
fn larger_lambda_c_never_grows_c() {
    let fe = extractor(5);
    let pooled = fe.pooled(&[&image(8)]).unwrap().remove(0);
    let msg = WatermarkMessage::random(30, 8);
    let norms: Vec<f64> = [0.0, 1e-4, 1e-2]
        .iter()
        .map(|&lambda_c| {
            let opts = RegisterOptions { lambda_c, early_stop: false, max_epochs: 300, ..Default::default() };
            register_pooled(&pooled, &msg, &opts).unwrap().1.c_norm
        })
        .collect();
    assert!(norms[1] <= norms[0] && norms[2] <= norms[1], "{norms:?}");
}

#[test]
fn wrong_extractor_is_rejected() {
    let (fe, other) = (extractor(6), extractor(7));
    let img = image(9);
    let (rec, _) = register(&fe, &img, &WatermarkMessage::random(30, 1), &RegisterOptions::default()).unwrap();
    assert!(matches!(extract(&other, &img, &rec), Err(WatermarkError::CheckpointMismatch { .. })));
    assert!(extract_many(&fe, &[&img], &[]).is_err());
}

#[test]
fn register_and_extract_leave_the_image_untouched() {
    let fe = extractor(8);
    let img = image(10);
    let before = (img.checksum(), img.data().to_vec());
    let (rec, _) = register(&fe, &img, &WatermarkMessage::random(30, 2), &RegisterOptions::default()).unwrap();
    extract(&fe, &img, &rec).unwrap();
    assert_eq!((img.checksum(), img.data().to_vec()), before);
}

#[test]
fn registration_is_deterministic_per_seed() {
    let fe = extractor(9);
    let img = image(11);
    let msg = WatermarkMessage::random(30, 3);
    let opts = RegisterOptions { seed: 42, ..Default::default() };
    let (a, _) = register(&fe, &img, &msg, &opts).unwrap();
    let (b, _) = register(&fe, &img, &msg, &opts).unwrap();
    assert_eq!(a.signature, b.signature);
    assert_eq!(a.record_id, b.record_id);
}

#[test]
fn shape_errors_are_reported() {
    assert!(matches!(
        register_pooled(&[0.0; 10], &WatermarkMessage::zeros(4), &RegisterOptions::default()),
        Err(WatermarkError::Shape(_))
    ));
}
