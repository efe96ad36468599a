use lssat_core::data::split;
use lssat_core::metrics::{accuracy, auc, roc_curve};
use lssat_core::objectives::{cosine_lr, joint_loss};
use lssat_core::patch::{patchify, sample_mask, unpatchify};
use lssat_core::texture::ldp_image;
use lssat_core::{GrayImage, ImageTensor, RngKey, SplitFractions};
use proptest::prelude::*;

proptest! {
    #[test]
    fn patchify_round_trip(
        batch in 1usize..3,
        frames in 1usize..3,
        channels in 1usize..4,
        p in 1usize..5,
        gh in 1usize..4,
        gw in 1usize..4,
        seed in any::<u64>(),
    ) {
        let dims = [batch, frames, channels, gh * p, gw * p];
        let n: usize = dims.iter().product();
        let values: Vec<f64> = (0..n).map(|i| (seed.wrapping_add(i as u64) % 977) as f64 / 7.0).collect();
        let x = ImageTensor::from_values(dims, values).unwrap();
        let patches = patchify(&x, p).unwrap();
        prop_assert_eq!(patches.tokens, frames * gh * gw);
        prop_assert_eq!(unpatchify(&patches, dims).unwrap(), x);
    }

    #[test]
    fn mask_partitions_tokens(batch in 1usize..4, tokens in 1usize..300, ratio in 0.0f64..1.0, seed in any::<u64>()) {
        let plan = sample_mask(batch, tokens, ratio, RngKey::new(seed)).unwrap();
        let m = (ratio * tokens as f64).floor() as usize;
        for (masked, visible) in plan.masked.iter().zip(&plan.visible) {
            prop_assert_eq!(masked.len(), m);
            prop_assert_eq!(masked.len() + visible.len(), tokens);
            prop_assert!(masked.iter().all(|i| visible.binary_search(i).is_err()));
        }
    }

    #[test]
    fn joint_loss_between_terms(cls in 0.0f64..10.0, rec in 0.0f64..10.0, lambda in 0.0f64..=1.0) {
        let j = joint_loss(cls, rec, lambda).unwrap();
        let tol = 1e-12 * cls.max(rec).max(1.0);
        prop_assert!(j >= cls.min(rec) - tol && j <= cls.max(rec) + tol);
    }

    #[test]
    fn cosine_lr_non_increasing(total in 1usize..5000, frac in 0.0f64..1.0) {
        let s = (frac * total as f64) as usize;
        let a = cosine_lr(s, total, 5e-5, 1e-6).unwrap();
        let b = cosine_lr(s + 1, total, 5e-5, 1e-6).unwrap();
        prop_assert!(b <= a);
    }

    #[test]
    fn roc_is_monotone(scores in prop::collection::vec((0u8..6, any::<bool>()), 2..40)) {
        let mut positive: Vec<bool> = scores.iter().map(|s| s.1).collect();
        positive[0] = true;
        positive[1] = false;
        let s: Vec<f64> = scores.iter().map(|s| s.0 as f64).collect();
        let roc = roc_curve(&s, &positive).unwrap();
        prop_assert_eq!((roc[0].fpr, roc[0].tpr), (0.0, 0.0));
        let last = roc.last().unwrap();
        prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        prop_assert!(roc.windows(2).all(|w| w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr));
        prop_assert!((0.0..=1.0).contains(&auc(&roc)));
    }

    #[test]
    fn accuracy_ignores_order(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..30), rot in 0usize..30) {
        let (pred, labels): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let mut rotated = pairs.clone();
        rotated.rotate_left(rot % pairs.len());
        let (pred2, labels2): (Vec<usize>, Vec<usize>) = rotated.into_iter().unzip();
        prop_assert_eq!(accuracy(&pred, &labels, 3).unwrap(), accuracy(&pred2, &labels2, 3).unwrap());
    }

    #[test]
    fn split_partitions_indices(n in 2usize..200, seed in any::<u64>()) {
        let fractions = SplitFractions { train: 0.7, val: 0.1, test: 0.2 };
        if let Ok(s) = split(n, fractions, seed) {
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(split(n, fractions, seed).unwrap(), s);
        }
    }

    #[test]
    fn ldp_codes_have_k_bits(pixels in prop::collection::vec(any::<u8>(), 25), k in 1usize..8) {
        let img = GrayImage::new(5, 5, pixels).unwrap();
        let codes = ldp_image(&img, k).unwrap().codes;
        prop_assert!(codes.iter().all(|c| c.count_ones() as usize == k));
    }

    #[test]
    fn ldp_ignores_brightness_offset(pixels in prop::collection::vec(0u8..200, 36), shift in 0u8..56) {
        let a = GrayImage::new(6, 6, pixels.clone()).unwrap();
        let b = GrayImage::new(6, 6, pixels.iter().map(|p| p + shift).collect()).unwrap();
        prop_assert_eq!(ldp_image(&a, 3).unwrap().codes, ldp_image(&b, 3).unwrap().codes);
    }
}
