mod common;

use std::collections::BTreeSet;

use common::{best_rank_oracle, cka_oracle, gaussian, hsic_oracle, orthogonal, rel_frobenius, rng};
use llns_core::arch::{Architecture, Role};
use llns_core::importance::{select_by_importance, ImportanceVector};
use llns_core::lora::pissa_init;
use llns_core::repio::{Dtype, Tensor, TensorContainer};
use llns_core::similarity::{cka, hsic, linear_gram, RepresentationMatrix, TokenRule};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn rep(m: DMatrix<f64>) -> RepresentationMatrix {
    RepresentationMatrix::new(m, 0, TokenRule::LastToken).unwrap()
}

fn ck(x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    cka(&rep(x.clone()), &rep(y.clone())).unwrap().value
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn cka_bounds_and_symmetry(seed in any::<u64>(), p in 2usize..20, d1 in 1usize..10, d2 in 1usize..10) {
        let mut r = rng(seed);
        let x = gaussian(p, d1, &mut r);
        let y = gaussian(p, d2, &mut r);
        let a = ck(&x, &y);
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a - ck(&y, &x)).abs() <= 1e-8);
        prop_assert!((ck(&x, &x) - 1.0).abs() <= 1e-8);
    }

    #[test]
    fn cka_invariances(seed in any::<u64>(), p in 3usize..20, d1 in 1usize..10, d2 in 1usize..10, c in 0.01f64..100.0) {
        let mut r = rng(seed);
        let x = gaussian(p, d1, &mut r);
        let y = gaussian(p, d2, &mut r);
        let base = ck(&x, &y);
        let q = orthogonal(d1, &mut r);
        prop_assert!((ck(&(&x * q), &y) - base).abs() <= 1e-8);
        prop_assert!((ck(&(&x * c), &y) - base).abs() <= 1e-8);
        let shift = gaussian(1, d1, &mut r) * 10.0;
        let moved = DMatrix::from_fn(p, d1, |i, j| x[(i, j)] + shift[(0, j)]);
        prop_assert!((ck(&moved, &y) - base).abs() <= 1e-8);
    }

    #[test]
    fn hsic_matches_oracle(seed in any::<u64>(), p in 2usize..=16, d1 in 1usize..8, d2 in 1usize..8) {
        let mut r = rng(seed);
        let x = rep(gaussian(p, d1, &mut r));
        let y = rep(gaussian(p, d2, &mut r));
        let (k, q) = (linear_gram(&x), linear_gram(&y));
        let fast = hsic(&k, &q).unwrap();
        let slow = hsic_oracle(k.data(), q.data());
        prop_assert!((fast - slow).abs() <= 1e-10 * slow.abs().max(1e-300), "{fast} vs {slow}");
        let c = cka(&x, &y).unwrap().value;
        let o = cka_oracle(x.data(), y.data());
        prop_assert!((c - o).abs() <= 1e-10 * o.abs().max(1e-12), "{c} vs {o}");
    }

    #[test]
    fn selection_nests_and_follows_permutations(seed in any::<u64>(), m in 2usize..24) {
        let mut r = rng(seed);
        let mut scores: Vec<f64> = (0..m).map(|i| i as f64 / m as f64).collect();
        scores.shuffle(&mut r);
        let iv = ImportanceVector::from_scores(scores.clone(), BTreeSet::new(), Architecture::DecoderOnly, "p").unwrap();
        let mut prev = BTreeSet::new();
        for n in 1..=m {
            let s = select_by_importance(&iv, n).unwrap().selected;
            prop_assert!(prev.is_subset(&s));
            prop_assert_eq!(s.len(), n);
            prev = s;
        }

        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut r);
        let mut permuted = vec![0.0; m];
        for (i, &j) in perm.iter().enumerate() {
            permuted[j] = scores[i];
        }
        let piv = ImportanceVector::from_scores(permuted, BTreeSet::new(), Architecture::DecoderOnly, "p").unwrap();
        let n = m / 2 + 1;
        let a: BTreeSet<usize> = select_by_importance(&iv, n).unwrap().selected.iter().map(|&l| perm[l - 1] + 1).collect();
        prop_assert_eq!(a, select_by_importance(&piv, n).unwrap().selected);
    }

    #[test]
    fn containers_round_trip(seed in any::<u64>(), shapes in proptest::collection::vec((0usize..6, 0usize..6), 0..5)) {
        let mut r = rng(seed);
        let tensors: Vec<Tensor> = shapes
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| {
                let dtype = if i % 2 == 0 { Dtype::F64 } else { Dtype::F32 };
                let m = gaussian(a, b, &mut r);
                let m = if dtype == Dtype::F32 { m.map(|v| v as f32 as f64) } else { m };
                Tensor::from_matrix(format!("t{i}"), dtype, &m)
            })
            .collect();
        let c = TensorContainer { tensors };
        let back = TensorContainer::decode(&c.encode().unwrap()).unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn pissa_is_the_best_low_rank_part(seed in any::<u64>(), rows in 2usize..14, cols in 2usize..14, rank in 1usize..6) {
        let rank = rank.min(rows.min(cols));
        let mut r = rng(seed);
        let w = gaussian(rows, cols, &mut r);
        let (residual, ad) = pissa_init(&w, rank, Role::Wq).unwrap();
        let low = ad.delta();
        prop_assert!(rel_frobenius(&(&residual + &low), &w) <= 1e-10);
        prop_assert!(low.rank(1e-9 * w.norm()) <= rank);
        prop_assert!(rel_frobenius(&low, &best_rank_oracle(&w, rank)) <= 1e-6);
    }
}

#[test]
fn pissa_rank4_of_16x8_matches_oracle() {
    let mut r = rng(42);
    let w = gaussian(16, 8, &mut r);
    let (_, ad) = pissa_init(&w, 4, Role::Wup).unwrap();
    assert_eq!((ad.b.shape(), ad.a.shape()), ((16, 4), (4, 8)));
    assert!(rel_frobenius(&ad.delta(), &best_rank_oracle(&w, 4)) <= 1e-8);
}
