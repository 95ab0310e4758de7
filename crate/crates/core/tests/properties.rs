use proptest::prelude::*;
use tryon_core::diffusion::{composite, NoiseSchedule};
use tryon_core::metrics::{fid, kid, ssim};
use tryon_core::rng::Rng;
use tryon_core::tensor::Tensor;
use tryon_core::warp::{average_flow, backward_warp, FlowField};

fn image(seed: u64, c: usize, h: usize, w: usize) -> Tensor {
    Rng::new(seed).uniform_tensor(&[c, h, w], -1.0, 1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn zero_flow_warp_is_identity(seed in any::<u64>(), h in 2usize..12, w in 2usize..12) {
        let img = image(seed, 3, h, w);
        prop_assert_eq!(backward_warp(&img, &FlowField::zeros(h, w)).unwrap(), img);
    }

    #[test]
    fn integer_shift_moves_pixels(seed in any::<u64>(), dx in -2i32..=2, dy in -2i32..=2) {
        let (h, w) = (9, 8);
        let img = image(seed, 2, h, w);
        let out = backward_warp(&img, &FlowField::constant(h, w, dx as f64, dy as f64)).unwrap();
        for y in 0..h {
            for x in 0..w {
                let sx = (x as i32 + dx).clamp(0, w as i32 - 1) as usize;
                let sy = (y as i32 + dy).clamp(0, h as i32 - 1) as usize;
                prop_assert_eq!(out.at3(1, y, x), img.at3(1, sy, sx));
            }
        }
    }

    #[test]
    fn warp_stays_in_source_range(seed in any::<u64>(), mag in 0.0f64..6.0) {
        let img = image(seed, 3, 7, 6);
        let flow = FlowField::new(Rng::new(seed ^ 1).uniform_tensor(&[2, 7, 6], -mag, mag)).unwrap();
        let out = backward_warp(&img, &flow).unwrap();
        prop_assert!(out.min() >= img.min() - 1e-12 && out.max() <= img.max() + 1e-12);
    }

    #[test]
    fn averaging_equal_flows_is_exact(seed in any::<u64>(), k in 1usize..8) {
        let f = FlowField::new(Rng::new(seed).uniform_tensor(&[2, 5, 4], -3.0, 3.0).round_f32()).unwrap();
        prop_assert_eq!(average_flow(&vec![f.clone(); k]).unwrap(), f);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in any::<u64>()) {
        let (a, b) = (image(seed, 3, 12, 10), image(seed.wrapping_add(1), 3, 12, 10));
        let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn distribution_scores_vanish_on_identical_sets(seed in any::<u64>(), n in 4usize..12) {
        let mut rng = Rng::new(seed);
        let feats: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        prop_assert!(fid(&feats, &feats).unwrap().abs() <= 1e-6);
        prop_assert!(kid(&feats, &feats).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn composite_keeps_unmasked_pixels(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let dec = rng.uniform_tensor(&[3, 6, 5], -1.0, 1.0);
        let agn = rng.uniform_tensor(&[3, 6, 5], -1.0, 1.0);
        let mask = Tensor::from_fn(&[1, 6, 5], |_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 });
        let out = composite(&dec, &mask, &agn).unwrap();
        for i in 0..out.numel() {
            let m = mask.data()[i % 30];
            let want = if m == 0.0 { agn.data()[i] } else { dec.data()[i] };
            prop_assert_eq!(out.data()[i], want);
        }
    }

    #[test]
    fn noise_schedule_is_monotone(t in 1usize..400) {
        let s = NoiseSchedule::linear(400, 1e-4, 0.02).unwrap();
        prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        prop_assert!(s.alpha_bar(t) > 0.0);
    }
}

#[test]
fn sampling_timesteps_descend_to_zero() {
    let s = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
    let ts = s.sampling_timesteps(50).unwrap();
    assert_eq!(ts.len(), 50);
    assert!(ts.windows(2).all(|w| w[0] > w[1]));
    assert!(s.sampling_timesteps(0).is_err());
    assert!(s.sampling_timesteps(201).is_err());
}
