mod common;

use common::*;
use molex_core::efpca::{fit_efpca, transform, EfpcaConfig};
use molex_core::embedding::{embed_molecule, EmbeddingTable, OovPolicy};
use molex_core::explain::{
    effective_weight, explanation_auc, ngram_contributions, normalize_scores, t_statistic,
};
use molex_core::gselfies::Molecule;
use molex_core::linear::{ols_fit, FeatureSplit};
use molex_core::vib::kl_to_standard_normal;
use molex_core::Exec;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn finite(lo: f64, hi: f64) -> impl Strategy<Value = f64> {
    lo..hi
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auc_invariant_under_monotone_maps(
        scores in prop::collection::vec(finite(-5.0, 5.0), 2..30),
        seed in any::<u64>(),
        scale in finite(0.1, 10.0),
        shift in finite(-3.0, 3.0),
    ) {
        let mut r = rng(seed);
        let mut mask: Vec<u8> = scores.iter().map(|_| u8::from(uniform(&mut r, 0.0, 1.0) < 0.5)).collect();
        mask[0] = 0;
        mask[1] = 1;
        let base = explanation_auc(&scores, &mask).unwrap();
        let affine: Vec<f64> = scores.iter().map(|s| scale * s + shift).collect();
        let cubed: Vec<f64> = scores.iter().map(|s| s.powi(3)).collect();
        let squashed: Vec<f64> = scores.iter().map(|s| s.tanh()).collect();
        prop_assert!((0.0..=1.0).contains(&base));
        prop_assert_eq!(base, explanation_auc(&affine, &mask).unwrap());
        prop_assert_eq!(base, explanation_auc(&cubed, &mask).unwrap());
        let flipped: Vec<u8> = mask.iter().map(|m| 1 - m).collect();
        prop_assert!((base + explanation_auc(&scores, &flipped).unwrap() - 1.0).abs() < 1e-12);
        // tanh may merge distinct scores into ties, which can only move AUC toward 1/2.
        let t = explanation_auc(&squashed, &mask).unwrap();
        prop_assert!((t - 0.5).abs() <= (base - 0.5).abs() + 1e-12);
    }

    #[test]
    fn normalization_bounds(scores in prop::collection::vec(finite(-1e3, 1e3), 1..40)) {
        let norm = normalize_scores(&scores);
        prop_assert_eq!(norm.len(), scores.len());
        prop_assert!(norm.iter().all(|v| (0.0..=100.0).contains(v)));
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        if max > min {
            let imax = scores.iter().position(|&s| s == max).unwrap();
            let imin = scores.iter().position(|&s| s == min).unwrap();
            prop_assert_eq!(norm[imax], 100.0);
            prop_assert_eq!(norm[imin], 0.0);
            for i in 0..scores.len() {
                for j in 0..scores.len() {
                    if scores[i] < scores[j] {
                        prop_assert!(norm[i] <= norm[j]);
                    }
                }
            }
        } else {
            prop_assert!(norm.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn kl_nonnegative_and_zero_only_at_standard_normal(
        mu in prop::collection::vec(finite(-4.0, 4.0), 1..8),
        lv_seed in any::<u64>(),
    ) {
        let mut r = rng(lv_seed);
        let lv: Vec<f64> = mu.iter().map(|_| uniform(&mut r, -5.0, 5.0)).collect();
        let kl = kl_to_standard_normal(&mu, &lv).unwrap();
        prop_assert!(kl >= 0.0);
        let at_origin = kl_to_standard_normal(&vec![0.0; mu.len()], &vec![0.0; mu.len()]).unwrap();
        prop_assert_eq!(at_origin, 0.0);
        if mu.iter().chain(&lv).any(|v| v.abs() > 1e-3) {
            prop_assert!(kl > 0.0);
        }
    }

    #[test]
    fn t_statistic_scale_law(seed in any::<u64>(), c in finite(-20.0, 20.0)) {
        prop_assume!(c.abs() > 1e-3);
        let mut r = rng(seed);
        let (n, d) = (25, 3);
        let e = DMatrix::from_fn(n, d, |_, _| normal(&mut r));
        let y = DVector::from_fn(n, |_, _| normal(&mut r));
        let ols = ols_fit(&e, &y).unwrap();
        let v = normals(&mut r, d);
        prop_assume!(v.iter().any(|x| x.abs() > 1e-6));
        let scaled: Vec<f64> = v.iter().map(|x| c * x).collect();
        let t = t_statistic(&ols, &v).unwrap();
        let ts = t_statistic(&ols, &scaled).unwrap();
        prop_assert!((ts - c.signum() * t).abs() < 1e-9 * t.abs().max(1.0));
    }

    #[test]
    fn efpca_transform_is_affine(seed in any::<u64>(), a in finite(-3.0, 3.0), b in finite(-3.0, 3.0)) {
        let mut r = rng(seed);
        let curves: Vec<Vec<f64>> = (0..20).map(|_| normals(&mut r, 10)).collect();
        let config = EfpcaConfig { components: 3, p: Some(8), ..EfpcaConfig::default() };
        let model = fit_efpca(&curves, &config, Exec::Sequential).unwrap();
        let x = normals(&mut r, 10);
        let y = normals(&mut r, 10);
        let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
        // Scores are affine, so f(ax + by) = a f(x) + b f(y) + (1 - a - b) f(0).
        let zero = transform(&model, &[0.0; 10]).unwrap();
        let fx = transform(&model, &x).unwrap();
        let fy = transform(&model, &y).unwrap();
        let fm = transform(&model, &mix).unwrap();
        for i in 0..3 {
            let expected = a * fx[i] + b * fy[i] + (1.0 - a - b) * zero[i];
            prop_assert!((fm[i] - expected).abs() < 1e-9 * (1.0 + expected.abs()));
        }
    }

    #[test]
    fn projectors_partition_identity(seed in any::<u64>(), p in 2usize..10, d_c in 0usize..10) {
        let d_c = d_c.min(p);
        let mut r = rng(seed);
        let dirs: Vec<DVector<f64>> = (0..d_c).map(|_| DVector::from_vec(normals(&mut r, p))).collect();
        let split = FeatureSplit::from_directions(&dirs, p).unwrap();
        let z = DVector::from_vec(normals(&mut r, p));
        let h = split.project_h(&z).unwrap();
        let res = split.project_r(&z).unwrap();
        prop_assert!((&h + &res - &z).amax() < 1e-10);
        prop_assert!(h.dot(&res).abs() < 1e-10 * z.norm_squared().max(1.0));
        prop_assert!((split.project_h(&h).unwrap() - &h).amax() < 1e-10);
        prop_assert_eq!(split.explainable_coords(&z).unwrap().len(), d_c);
        prop_assert_eq!(split.residual_coords(&z).unwrap().len(), p - d_c);
    }

    #[test]
    fn contributions_decompose_ngram_logits(
        seed in any::<u64>(),
        len in 1usize..9,
        n in 1usize..5,
    ) {
        let mut r = rng(seed);
        let (vocab, dim) = (5, 4);
        let tokens: Vec<String> = (0..vocab).map(|i| format!("T{i}")).collect();
        let table = EmbeddingTable::new(dim, tokens.clone(), normals(&mut r, vocab * dim)).unwrap();
        let molecule = Molecule {
            id: "m".into(),
            tokens: (0..len).map(|_| tokens[(uniform(&mut r, 0.0, vocab as f64)) as usize].clone()).collect(),
            label: 0,
            gt_mask: None,
        };
        let t = DMatrix::from_fn(3, dim, |_, _| normal(&mut r));
        let offset = DVector::from_vec(normals(&mut r, 3));
        let w = DVector::from_vec(normals(&mut r, 3));
        let eff = effective_weight(&t, &offset, &w, 0.0).unwrap();
        let emb = embed_molecule(&table, &molecule, n, OovPolicy::Strict).unwrap();
        let contribs = ngram_contributions(&table, &molecule, n, OovPolicy::Strict, &eff).unwrap();
        prop_assert_eq!(contribs.len(), emb.per_ngram.len());
        for (g, (_, cs)) in emb.per_ngram.iter().zip(&contribs) {
            let lhs = cs.iter().sum::<f64>() / cs.len() as f64;
            let rhs = dot(&g.vector, &eff.weight);
            prop_assert!((lhs - rhs).abs() < 1e-10 * rhs.abs().max(1.0));
        }
    }
}
