//! Randomized invariant checks across the public API: reductions that must
//! stay normalized, losses with known symmetries, transforms that must
//! round-trip, and counters with closed-form ratios.

use ccnet_core::dataio::{dihedral, read_cube, write_cube, HsiCube};
use ccnet_core::grscm::{attention_weight_count, AttentionKind};
use ccnet_core::objectives::{mrae_loss, spectral_difference_loss, DifNormalization};
use ccnet_core::paf::{patchify, unpatchify};
use ccnet_core::training::{cosine_lr, TrainConfig};
use ccnet_core::Tensor;
use proptest::prelude::*;

fn finite_vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, n..=n)
}

fn unit_vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..1.0, n..=n)
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(
        rows in 1usize..6,
        cols in 1usize..8,
        seed_vals in finite_vals(48),
    ) {
        let data: Vec<f64> = seed_vals.iter().cycle().take(rows * cols).cloned().collect();
        let x = Tensor::from_vec(data, &[rows, cols]).unwrap();
        let s = x.softmax_lastdim().unwrap();
        for r in 0..rows {
            let sum: f64 = s.data()[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12, "row {r} sums to {sum}");
            for v in &s.data()[r * cols..(r + 1) * cols] {
                prop_assert!(*v >= 0.0);
            }
        }
    }

    #[test]
    fn mrae_is_nonnegative_and_zero_only_at_equality(
        gt_vals in unit_vals(24),
        noise in finite_vals(24),
    ) {
        let gt = Tensor::from_vec(gt_vals.clone(), &[2, 4, 3]).unwrap();
        prop_assert_eq!(mrae_loss(&gt, &gt).unwrap().item().unwrap(), 0.0);
        let pred_vals: Vec<f64> = gt_vals
            .iter()
            .zip(&noise)
            .map(|(g, n)| g + n * 0.1)
            .collect();
        let moved = pred_vals.iter().zip(&gt_vals).any(|(p, g)| p != g);
        let pred = Tensor::from_vec(pred_vals, &[2, 4, 3]).unwrap();
        let loss = mrae_loss(&pred, &gt).unwrap().item().unwrap();
        prop_assert!(loss >= 0.0);
        if moved {
            prop_assert!(loss > 0.0);
        }
    }

    #[test]
    fn spectral_difference_ignores_constant_shift(
        gt_vals in unit_vals(36),
        shift in -0.5f64..0.5,
    ) {
        let gt = Tensor::from_vec(gt_vals.clone(), &[3, 4, 3]).unwrap();
        let pred_vals: Vec<f64> = gt_vals.iter().map(|g| g + shift).collect();
        let pred = Tensor::from_vec(pred_vals, &[3, 4, 3]).unwrap();
        for norm in [DifNormalization::PixelMean, DifNormalization::PixelSum] {
            let loss = spectral_difference_loss(&pred, &gt, norm).unwrap().item().unwrap();
            prop_assert!(loss.abs() < 1e-12, "{norm:?} gave {loss}");
        }
    }

    #[test]
    fn spectral_difference_is_band_permutation_invariant(
        gt_vals in unit_vals(32),
        pred_vals in unit_vals(32),
        rot in 1usize..4,
    ) {
        let (h, w, b) = (2usize, 4usize, 4usize);
        let base_gt = Tensor::from_vec(gt_vals.clone(), &[h, w, b]).unwrap();
        let base_pred = Tensor::from_vec(pred_vals.clone(), &[h, w, b]).unwrap();
        let reference = spectral_difference_loss(&base_pred, &base_gt, DifNormalization::PixelMean)
            .unwrap()
            .item()
            .unwrap();
        // Rotate the band axis of both cubes by the same offset.
        let permute = |vals: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; vals.len()];
            for p in 0..h * w {
                for c in 0..b {
                    out[p * b + (c + rot) % b] = vals[p * b + c];
                }
            }
            out
        };
        let gt_p = Tensor::from_vec(permute(&gt_vals), &[h, w, b]).unwrap();
        let pred_p = Tensor::from_vec(permute(&pred_vals), &[h, w, b]).unwrap();
        let shuffled = spectral_difference_loss(&pred_p, &gt_p, DifNormalization::PixelMean)
            .unwrap()
            .item()
            .unwrap();
        prop_assert!((reference - shuffled).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_stays_bounded_and_non_increasing(total in 1u64..300) {
        let cfg = TrainConfig {
            total_steps: total,
            ..TrainConfig::default()
        };
        let mut prev = f64::INFINITY;
        for step in 0..=total {
            let lr = cosine_lr(step, &cfg).unwrap();
            prop_assert!(lr >= cfg.lr_min - 1e-15 && lr <= cfg.lr0 + 1e-15);
            prop_assert!(lr <= prev + 1e-15);
            prev = lr;
        }
        prop_assert!((cosine_lr(0, &cfg).unwrap() - cfg.lr0).abs() < 1e-15);
        prop_assert!((cosine_lr(total, &cfg).unwrap() - cfg.lr_min).abs() < 1e-15);
    }

    #[test]
    fn dihedral_ops_are_invertible(
        vals in finite_vals(24),
        op in 0u8..8,
    ) {
        let x = Tensor::from_vec(vals, &[2, 4, 3]).unwrap();
        let y = dihedral(&x, op).unwrap();
        // Every symmetry of the square has an inverse among the eight ops.
        let mut restored = false;
        for inv in 0..8 {
            let z = dihedral(&y, inv).unwrap();
            if z.shape() == x.shape() && z.data() == x.data() {
                restored = true;
                break;
            }
        }
        prop_assert!(restored, "op {op} has no inverse among the eight ops");
    }

    #[test]
    fn patchify_round_trips(
        hp in 1usize..4,
        wp in 1usize..4,
        r in 1usize..4,
        c in 1usize..4,
    ) {
        let (h, w) = (hp * r, wp * r);
        let vals: Vec<f64> = (0..h * w * c).map(|i| i as f64).collect();
        let x = Tensor::from_vec(vals, &[h, w, c]).unwrap();
        let p = patchify(&x, r).unwrap();
        let back = unpatchify(&p, h, w, r).unwrap();
        prop_assert_eq!(back.data(), x.data());
    }

    #[test]
    fn grouped_attention_count_ratio_equals_group_count(
        k_pow in 0u32..4,
        c_pow in 3u32..6,
        heads in 1usize..5,
    ) {
        let k = 2usize.pow(k_pow);
        let c_in = 2usize.pow(c_pow);
        prop_assume!(c_in % k == 0);
        let grouped = attention_weight_count(c_in, k, heads, AttentionKind::Grouped);
        let mha = attention_weight_count(c_in, k, heads, AttentionKind::MultiHead);
        prop_assert_eq!(mha, grouped * k);
    }

    #[test]
    fn cube_files_round_trip(
        h in 1usize..5,
        w in 1usize..5,
        b in 1usize..5,
        fill in unit_vals(64),
    ) {
        let wavelengths: Vec<f64> = (0..b).map(|i| 400.0 + 10.0 * i as f64).collect();
        let data: Vec<f64> = fill
            .iter()
            .cycle()
            .take(h * w * b)
            .map(|v| *v as f32 as f64)
            .collect();
        let cube = HsiCube::new(h, w, wavelengths, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cube.hsic");
        write_cube(&path, &cube).unwrap();
        let back = read_cube(&path).unwrap();
        prop_assert_eq!(back.height, cube.height);
        prop_assert_eq!(back.width, cube.width);
        prop_assert_eq!(back.wavelengths, cube.wavelengths);
        prop_assert_eq!(back.data, cube.data);
    }
}
