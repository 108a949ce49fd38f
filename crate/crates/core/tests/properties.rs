use acmt_core::bridge::{cfm_interpolate, diffusion_step};
use acmt_core::metrics::{asd, dsc, fid_from_descriptors, iou};
use acmt_core::net::{NetworkConfig, TranslatorNet};
use acmt_core::objectives::{boundary_loss, sb_loss, texture_loss, LossHeads, SbProjection};
use acmt_core::phantom::generate_phantom;
use acmt_core::registration::{warp, Interpolation};
use acmt_core::rng;
use acmt_core::sampler::{translate, TranslateOptions};
use acmt_core::{BinaryMask, DisplacementField, Image};
use ndarray::{Array2, Array3};
use proptest::prelude::*;

fn image(h: usize, w: usize, lo: f64, hi: f64) -> impl Strategy<Value = Image> {
    proptest::collection::vec(lo..hi, h * w)
        .prop_map(move |v| Image::new(Array2::from_shape_vec((h, w), v).unwrap()).unwrap())
}

fn features(c: usize, h: usize, w: usize) -> impl Strategy<Value = Array3<f64>> {
    proptest::collection::vec(-3.0..3.0f64, c * h * w).prop_map(move |v| Array3::from_shape_vec((c, h, w), v).unwrap())
}

fn mask(side: usize) -> impl Strategy<Value = BinaryMask> {
    proptest::collection::vec(any::<bool>(), side * side).prop_map(move |v| {
        let mut m = BinaryMask::from_fn(side, side, |(y, x)| v[y * side + x]);
        // Nonempty so every metric is defined.
        m.set(side / 2, side / 2, true);
        m
    })
}

fn tiny_net(seed: u64) -> TranslatorNet {
    let config = NetworkConfig {
        image_size: [8, 8],
        levels: 3,
        base_channels: 2,
        time_embed_dim: 4,
        shallow_tap_level: 1,
        deep_tap_level: 2,
    };
    TranslatorNet::new(config, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn telescoping_reproduces_target_for_any_pool(
        cuts in proptest::collection::vec(0.01..0.99f64, 0..8),
        x0 in image(4, 4, -1.0, 1.0),
        x1 in image(4, 4, -1.0, 1.0),
    ) {
        let mut pool = cuts;
        pool.push(0.0);
        pool.sort_by(f64::total_cmp);
        pool.dedup();
        pool.push(1.0);
        let mut r = rng::from_seed(0);
        let mut x = x0.clone();
        for w in pool.windows(2) {
            x = diffusion_step(&x, &x1, w[0], w[1], 0.0, &mut r).unwrap();
            // With a fixed target every state stays on the x0–x1 segment.
            let mut lambda: Option<f64> = None;
            for ((&a, &b), &v) in x0.as_slice().iter().zip(x1.as_slice()).zip(x.as_slice()) {
                if (b - a).abs() > 1e-3 {
                    let l = (v - a) / (b - a);
                    if let Some(l0) = lambda {
                        prop_assert!((l - l0).abs() < 1e-6);
                    }
                    lambda = Some(l);
                }
            }
        }
        prop_assert!(x.max_abs_diff(&x1) <= 1e-12);
    }

    #[test]
    fn zero_sigma_interpolation_is_linear(
        a in image(3, 5, -1.0, 1.0),
        b in image(3, 5, -1.0, 1.0),
        t in 0.0..1.0f64,
    ) {
        let mut r = rng::from_seed(1);
        let x = cfm_interpolate(&a, &b, 0.0, 1.0, t, 0.0, &mut r).unwrap();
        for ((&av, &bv), &xv) in a.as_slice().iter().zip(b.as_slice()).zip(x.as_slice()) {
            prop_assert!((xv - (t * bv + (1.0 - t) * av)).abs() < 1e-12);
        }
    }

    #[test]
    fn network_output_stays_in_unit_range(x in image(8, 8, -1e6, 1e6), t in 0.0..1.0f64, seed in 0u64..4) {
        let net = tiny_net(seed);
        let y = net.forward(&x, t, acmt_core::net::Mode::Eval).unwrap().x1_pred;
        prop_assert!(y.as_slice().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn sampler_output_stays_in_unit_range(x in image(8, 8, -1.0, 1.0), nfe in 1usize..=6, stochastic: bool) {
        let net = tiny_net(3);
        let bridge = acmt_core::bridge::BridgeConfig { sigma: 0.5, ..Default::default() };
        let opts = TranslateOptions { nfe, stochastic, seed: 9 };
        let y = translate(&x, &net, &bridge, &opts).unwrap();
        prop_assert!(y.as_slice().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn feature_losses_are_non_negative(a in features(2, 5, 5), b in features(2, 5, 5)) {
        let heads = LossHeads::new(5, 2, 2);
        prop_assert!(texture_loss(&a, &b, &heads).unwrap().0 >= 0.0);
        prop_assert!(boundary_loss(&a, &b, &heads).unwrap().0 >= 0.0);
    }

    #[test]
    fn sb_loss_is_non_negative_without_noise(
        xs in proptest::collection::vec(image(3, 3, -1.0, 1.0), 1..6),
        shift in -0.5..0.5f64,
        t in 0.0..1.0f64,
    ) {
        let x1: Vec<Image> = xs.iter().map(|x| Image::new(x.as_array() + shift).unwrap()).collect();
        let proj = SbProjection::new(0, 9, 4);
        let (loss, _) = sb_loss(&xs, &x1, t, 0.0, &proj).unwrap();
        prop_assert!(loss >= 0.0);
        let (same, _) = sb_loss(&xs, &xs, t, 0.0, &proj).unwrap();
        prop_assert_eq!(same, 0.0);
    }

    #[test]
    fn overlap_metrics_are_symmetric_and_linked(a in mask(7), b in mask(7)) {
        let (d, j) = (dsc(&a, &b).unwrap(), iou(&a, &b).unwrap());
        prop_assert_eq!(d, dsc(&b, &a).unwrap());
        prop_assert_eq!(j, iou(&b, &a).unwrap());
        prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
        prop_assert!((asd(&a, &b).unwrap() - asd(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn fid_is_non_negative_and_order_free(
        a in proptest::collection::vec(proptest::collection::vec(-2.0..2.0f64, 3), 4..9),
        b in proptest::collection::vec(proptest::collection::vec(-2.0..2.0f64, 3), 4..9),
    ) {
        let to_arr = |v: &Vec<Vec<f64>>| Array2::from_shape_fn((v.len(), 3), |(i, k)| v[i][k]);
        let (xa, xb) = (to_arr(&a), to_arr(&b));
        let f = fid_from_descriptors(&xa, &xb).unwrap();
        prop_assert!(f >= 0.0);
        let mut ra = a.clone();
        ra.reverse();
        let mut rb = b.clone();
        rb.rotate_left(1);
        let g = fid_from_descriptors(&to_arr(&ra), &to_arr(&rb)).unwrap();
        prop_assert!((f - g).abs() <= 1e-9 * f.max(1.0));
    }

    #[test]
    fn zero_field_warp_is_identity(x in image(6, 9, -1.0, 1.0)) {
        let z = DisplacementField::zeros(6, 9);
        prop_assert_eq!(&warp(&x, &z, Interpolation::Bilinear).unwrap(), &x);
        prop_assert_eq!(&warp(&x, &z, Interpolation::Nearest).unwrap(), &x);
    }
}

/// Local-mean residual variance inside the zone, for one image.
fn speckle_variance(img: &Image, zone: &BinaryMask) -> f64 {
    let (h, w) = img.shape();
    let mut vals = Vec::new();
    for (y, x) in zone.points() {
        if y < 2 || x < 2 || y + 2 >= h || x + 2 >= w {
            continue;
        }
        let mut m = 0.0;
        for dy in 0..5 {
            for dx in 0..5 {
                m += img.get(y + dy - 2, x + dx - 2);
            }
        }
        vals.push(img.get(y, x) - m / 25.0);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

#[test]
fn us_speckle_dominates_mr_texture() {
    for seed in 0..100 {
        let p = generate_phantom(seed, (64, 64)).unwrap();
        let vu = speckle_variance(&p.us, &p.us_zone_mask().erode4());
        let vm = speckle_variance(&p.mr, &p.zone_mask.erode4());
        assert!(vu >= 2.0 * vm, "seed {seed}: us {vu} vs mr {vm}");
    }
}
