use hrvvs_core::views::{assemble_patches, assemble_quadrants, decompose, quadrant_origin, split_patches, FullFrame, stitch_fused, PatchWeights};
use hrvvs_core::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn frame(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[c, h, w], |_| rng.gen())
}

#[test]
fn quartering_partitions_the_frame() {
    for (c, h, w) in [(3, 64, 64), (1, 128, 64), (2, 64, 192)] {
        let f = frame(c, h, w, 1);
        let v = decompose(&f).unwrap();
        for (m, l) in v.locals.iter().enumerate() {
            let (oy, ox) = quadrant_origin(m, h / 2, w / 2);
            assert_eq!(l, &f.crop(oy, ox, h / 2, w / 2));
        }
        assert_eq!(assemble_quadrants(&v.locals).unwrap(), f);
        assert_eq!(v.global_view.shape(), &[c, h / 2, w / 2]);
        assert_eq!(v.stacked().shape(), &[5, c, h / 2, w / 2]);
    }
}

#[test]
fn bad_frame_sizes_are_rejected() {
    assert!(matches!(FullFrame::new(Tensor::zeros(&[3, 64, 96]), 0), Err(Error::RejectedInput(_))));
    assert!(matches!(decompose(&Tensor::zeros(&[3, 63, 64])), Err(Error::RejectedInput(_))));
    assert!(matches!(decompose(&Tensor::zeros(&[64, 64])), Err(Error::RejectedInput(_))));
}

#[test]
fn patch_round_trip_is_exact() {
    let local = frame(3, 32, 48, 2);
    let patches = split_patches(&local).unwrap();
    assert_eq!(patches.len(), 16);
    assert_eq!(patches[5], local.crop(8, 12, 8, 12));
    assert_eq!(assemble_patches(&patches).unwrap(), local);
}

#[test]
fn unit_weights_stitch_the_locals_and_zero_weights_the_global() {
    let f = frame(3, 64, 64, 3);
    let v = decompose(&f).unwrap();
    let ones: PatchWeights = [[1.0; 16]; 4];
    assert_eq!(stitch_fused(&v.locals, &v.global_view, &ones).unwrap(), f);
    let zeros: PatchWeights = [[0.0; 16]; 4];
    let up = v.global_view.resize_bilinear(64, 64);
    assert!(stitch_fused(&v.locals, &v.global_view, &zeros).unwrap().max_abs_diff(&up) < 1e-15);
}

#[test]
fn out_of_range_weights_are_rejected() {
    let v = decompose(&frame(1, 64, 64, 4)).unwrap();
    let mut w: PatchWeights = [[0.5; 16]; 4];
    w[2][3] = 1.5;
    assert!(stitch_fused(&v.locals, &v.global_view, &w).is_err());
}

#[test]
fn stitch_stays_between_local_and_upsampled_global() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..1000 {
        let f = frame(1, 64, 64, 100 + case);
        let v = decompose(&f).unwrap();
        let w: PatchWeights = std::array::from_fn(|_| std::array::from_fn(|_| rng.gen()));
        let out = stitch_fused(&v.locals, &v.global_view, &w).unwrap();
        let up = v.global_view.resize_bilinear(64, 64);
        for i in (0..64 * 64).step_by(37) {
            let (a, b) = (f.data()[i], up.data()[i]);
            let o = out.data()[i];
            assert!(o >= a.min(b) - 1e-12 && o <= a.max(b) + 1e-12, "case {case} pixel {i}");
        }
    }
}

proptest! {
    #[test]
    fn decompose_then_assemble_is_identity(seed in any::<u64>(), k in 1usize..3) {
        let f = frame(2, 64 * k, 64, seed);
        let v = decompose(&f).unwrap();
        prop_assert_eq!(assemble_quadrants(&v.locals).unwrap(), f);
    }
}
