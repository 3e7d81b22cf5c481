use std::collections::BTreeMap;

use mext::gradreg::{flatten, project, regularize, GradVector, Layout};
use mext::tensor::Tensor;
use proptest::prelude::*;

fn pair(f: Vec<f64>, s: Vec<f64>) -> (GradVector<f64>, GradVector<f64>) {
    let layout = Layout::flat(f.len());
    (
        GradVector::from_values(layout.clone(), f).unwrap(),
        GradVector::from_values(layout, s).unwrap(),
    )
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn vectors() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-10.0f64..10.0, n),
            prop::collection::vec(-10.0f64..10.0, n),
        )
    })
}

#[test]
fn empty_map_flattens_to_zero_vector() {
    let layout = Layout::new(vec![("a".to_string(), vec![2, 2])]);
    let g = flatten::<f32>(&BTreeMap::new(), &layout).unwrap();
    assert_eq!(g.values(), &[0.0; 4]);
}

#[test]
fn flatten_unflatten_round_trip() {
    let layout = Layout::new(vec![("w".to_string(), vec![2, 3]), ("b".to_string(), vec![3])]);
    let mut m = BTreeMap::new();
    m.insert("w".to_string(), Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    m.insert("b".to_string(), Tensor::new(vec![3], vec![-1.0, 0.5, 7.0]).unwrap());
    let g = flatten(&m, &layout).unwrap();
    assert_eq!(g.unflatten(), m);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn regularize_properties((f, s) in vectors()) {
        let (gf, gs) = pair(f.clone(), s.clone());
        let r = regularize(&gf, &gs).unwrap();
        let d = dot(&f, &s);
        let degenerate = dot(&s, &s) < 1e-24;
        prop_assert_eq!(r.conflicted, d < 0.0 && !degenerate);
        let gstar = r.g_star.values();
        if r.conflicted {
            let p = project(&gf, &gs).unwrap();
            prop_assert!(dot(p.values(), &s).abs() <= 1e-6 * norm(&f) * norm(&s));
            let ss = dot(&s, &s);
            prop_assert!((dot(gstar, &s) - ss).abs() <= 1e-9 * ss.max(1.0) * norm(&f).max(1.0));
            // The projection already lies on the normal plane.
            let (pv, gs2) = pair(p.values().to_vec(), s.clone());
            let again = regularize(&pv, &gs2).unwrap();
            for (a, b) in again.g_star.values().iter().zip(gstar) {
                prop_assert!((a - b).abs() <= 1e-9 * norm(&f).max(1.0));
            }
        } else {
            let sum: Vec<f64> = f.iter().zip(&s).map(|(a, b)| a + b).collect();
            prop_assert_eq!(gstar, sum.as_slice());
        }
        prop_assert!(dot(gstar, &s) >= -1e-9);
    }

    #[test]
    fn conflict_is_scale_invariant((f, s) in vectors(), alpha in 1e-3f64..1e3) {
        let (gf, gs) = pair(f.clone(), s.clone());
        let scaled: Vec<f64> = f.iter().map(|v| v * alpha).collect();
        let (gfa, _) = pair(scaled, s.clone());
        prop_assert_eq!(
            regularize(&gf, &gs).unwrap().conflicted,
            regularize(&gfa, &gs).unwrap().conflicted
        );
    }
}

#[test]
fn hand_cases() {
    let cases = [
        ([1.0, 0.0], [1.0, 1.0], [2.0, 1.0], false),
        ([0.0, -1.0], [0.0, 1.0], [0.0, 1.0], true),
        ([2.0, 0.0], [-1.0, 1.0], [0.0, 2.0], true),
    ];
    for (f, s, want, conflicted) in cases {
        let (gf, gs) = pair(f.to_vec(), s.to_vec());
        let r = regularize(&gf, &gs).unwrap();
        assert_eq!(r.g_star.values(), &want);
        assert_eq!(r.conflicted, conflicted);
    }
}
