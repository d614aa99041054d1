//! Property-based invariants across modules.

use diva_core::diagnostics::{effective_rank, er_increment, freq_profile, reconstruction_residual};
use diva_core::mat::Mat;
use diva_core::mi::{infonce, Critic, FactorBatch};
use diva_core::rng::Rng;
use diva_core::synthdata::{generate_dataset, sample_mask, DatasetConfig, MaskPattern, MaskSpec};
use proptest::prelude::*;

fn mat_from(rows: usize, cols: usize, data: &[f64]) -> Mat<f64> {
    Mat::from_fn(rows, cols, |r, c| data[(r * cols + c) % data.len()] + 0.01 * (r * cols + c) as f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn residual_stays_in_unit_interval(
        vals in proptest::collection::vec(-3.0f64..3.0, 64..=96),
        rows_g in 2usize..6,
        rows_u in 2usize..8,
        cols in 2usize..6,
        thr in 0.5f64..0.999,
    ) {
        let g = mat_from(rows_g, cols, &vals);
        let u = mat_from(rows_u, cols, &vals[8..]);
        if let Ok(r) = reconstruction_residual(&g, &u, thr) {
            prop_assert!((0.0..=1.0).contains(&r.value), "residual {}", r.value);
        }
    }

    #[test]
    fn effective_rank_bounds_and_scale_invariance(
        vals in proptest::collection::vec(-2.0f64..2.0, 48..=64),
        rows in 2usize..7,
        cols in 2usize..7,
        scale in 0.1f64..50.0,
    ) {
        let h = mat_from(rows, cols, &vals);
        if let Ok(er) = effective_rank(&h) {
            prop_assert!(er >= 1.0 - 1e-9);
            prop_assert!(er <= rows.min(cols) as f64 + 1e-9);
            let mut h2 = h.clone();
            h2.as_mut_slice().iter_mut().for_each(|x| *x *= scale);
            let er2 = effective_rank(&h2).unwrap();
            prop_assert!((er - er2).abs() < 1e-8, "{er} vs {er2} under scale {scale}");
        }
    }

    #[test]
    fn er_self_increment_is_zero(
        vals in proptest::collection::vec(-2.0f64..2.0, 48..=64),
        rows in 2usize..7,
        cols in 2usize..7,
    ) {
        let h = mat_from(rows, cols, &vals);
        if effective_rank(&h).is_ok() {
            prop_assert!(er_increment(&h, &h).unwrap().abs() <= 1e-9);
        }
    }

    #[test]
    fn infonce_bounds_and_permutation_invariance(
        seed in 0u64..5000,
        b in 2usize..8,
        d in 2usize..8,
    ) {
        let mut rng = Rng::new(seed);
        let za = FactorBatch::new(Mat::<f64>::randn(b, d, 1.0, &mut rng), (0..b).collect()).unwrap();
        let zb = FactorBatch::new(Mat::<f64>::randn(b, d, 1.0, &mut rng), (0..b).collect()).unwrap();
        let crit = Critic::cosine(0.2);
        let out = infonce(&za, &zb, &crit).unwrap();
        prop_assert!(out.loss >= 0.0);
        prop_assert!(out.mi_lower <= (b as f64).ln() + 1e-12);

        // common permutation of rows and ids leaves the loss unchanged
        let mut perm: Vec<usize> = (0..b).collect();
        rng.shuffle(&mut perm);
        let permute = |z: &FactorBatch<f64>| {
            let mut m = Mat::zeros(b, d);
            let mut ids = vec![0usize; b];
            for (to, &from) in perm.iter().enumerate() {
                m.row_mut(to).copy_from_slice(z.z.row(from));
                ids[to] = z.sample_ids[from];
            }
            FactorBatch::new(m, ids).unwrap()
        };
        let out2 = infonce(&permute(&za), &permute(&zb), &crit).unwrap();
        prop_assert!((out.loss - out2.loss).abs() < 1e-9, "{} vs {}", out.loss, out2.loss);
    }

    #[test]
    fn random_mask_popcount_tracks_ratio(
        seed in 0u64..5000,
        g in 2usize..20,
        lo in 0.0f64..0.9,
        width in 0.0f64..0.1,
    ) {
        let spec = MaskSpec { ratio_min: lo, ratio_max: (lo + width).min(1.0), pattern: MaskPattern::Random };
        let mut rng = Rng::new(seed);
        let m = sample_mask(&spec, g, &mut rng).unwrap();
        let expect = m.ratio_used * (g * g) as f64;
        prop_assert!((m.popcount() as f64 - expect).abs() <= 0.5);
    }

    #[test]
    fn contiguous_mask_is_a_rectangle(seed in 0u64..5000, g in 2usize..20) {
        let spec = MaskSpec { ratio_min: 0.05, ratio_max: 0.7, pattern: MaskPattern::Contiguous };
        let mut rng = Rng::new(seed);
        let m = sample_mask(&spec, g, &mut rng).unwrap();
        let cells = m.masked_cells();
        if cells.is_empty() {
            // tiny grids can draw a ratio that rounds to zero cells
            prop_assert_eq!(m.ratio_used, 0.0);
            return Ok(());
        }
        let rows: Vec<usize> = cells.iter().map(|c| c / g).collect();
        let cols: Vec<usize> = cells.iter().map(|c| c % g).collect();
        let (r0, r1) = (*rows.iter().min().unwrap(), *rows.iter().max().unwrap());
        let (c0, c1) = (*cols.iter().min().unwrap(), *cols.iter().max().unwrap());
        prop_assert_eq!((r1 - r0 + 1) * (c1 - c0 + 1), cells.len());
    }

    #[test]
    fn dataset_anchor_determines_shared_content(seed in 0u64..300) {
        let cfg = DatasetConfig { n_samples: 12, grid_side: 4, ..DatasetConfig::default() };
        let ds = generate_dataset(&cfg, seed).unwrap();
        for a in &ds {
            for b in &ds {
                if a.anchor == b.anchor {
                    prop_assert_eq!(&a.caption_tokens[..3], &b.caption_tokens[..3]);
                } else {
                    prop_assert_ne!(&a.caption_tokens[..3], &b.caption_tokens[..3]);
                }
            }
        }
    }
}

#[test]
fn freq_ratio_dc_invariance_random_fields() {
    let mut rng = Rng::new(44);
    for trial in 0..10 {
        let g = 4 + 2 * rng.below(3); // 4, 6, 8
        let d = 1 + rng.below(4);
        let hidden = Mat::from_fn(g * g, d, |_, _| rng.normal());
        let trace = diva_core::backbone::ForwardTrace {
            logits: Mat::<f64>::zeros(1, 1),
            hidden: vec![hidden.clone()],
        };
        let base = freq_profile(&trace, 0.5).unwrap()[0].value;
        assert!((0.0..=1.0).contains(&base));
        let mut shifted = hidden;
        shifted.as_mut_slice().iter_mut().for_each(|x| *x += 5.5);
        let trace2 = diva_core::backbone::ForwardTrace {
            logits: Mat::<f64>::zeros(1, 1),
            hidden: vec![shifted],
        };
        let after = freq_profile(&trace2, 0.5).unwrap()[0].value;
        assert!((base - after).abs() < 1e-10, "trial {trial}: {base} vs {after}");
    }
}
