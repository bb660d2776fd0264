mod common;

use common::{emd_lp, random_grid, random_points};
use ddsmc::eval::{emd, WeightedPoints};
use ddsmc::RngStream;
use proptest::prelude::*;

#[test]
fn lp_oracle_known_values() {
    let a = WeightedPoints::new(vec![vec![0.0, 0.0]], vec![1.0]).unwrap();
    let b = WeightedPoints::new(vec![vec![3.0, 4.0]], vec![1.0]).unwrap();
    assert!((emd_lp(&a, &b) - 5.0).abs() < 1e-12);
    let a = WeightedPoints::new(vec![vec![0.0], vec![2.0]], vec![0.5, 0.5]).unwrap();
    let b = WeightedPoints::new(vec![vec![1.0]], vec![1.0]).unwrap();
    assert!((emd_lp(&a, &b) - 1.0).abs() < 1e-12);
}

#[test]
fn agrees_with_lp_on_small_instances() {
    let mut rng = RngStream::new(11).rng();
    for k in 0..300 {
        let m = 1 + k % 5;
        let n = 1 + (k / 5) % 5;
        let a = random_points(&mut rng, m, k % 2 == 0);
        let b = random_points(&mut rng, n, k % 3 == 0);
        let got = emd(&a, &b).unwrap();
        let want = emd_lp(&a, &b);
        assert!((got - want).abs() <= 1e-9, "instance {k}: {got} vs {want}");
    }
}

#[test]
fn agrees_with_lp_on_grids() {
    let mut rng = RngStream::new(12).rng();
    for _ in 0..40 {
        let a = random_grid(&mut rng, 4, 6);
        let b = random_grid(&mut rng, 4, 6);
        // the oracle only sees occupied bins
        let strip = |w: &WeightedPoints| {
            let keep: Vec<usize> = (0..w.len()).filter(|&i| w.weights()[i] > 0.0).collect();
            WeightedPoints::new(
                keep.iter().map(|&i| w.point(i).to_vec()).collect(),
                keep.iter().map(|&i| w.weights()[i]).collect(),
            )
            .unwrap()
        };
        let want = emd_lp(&strip(&a), &strip(&b));
        assert!((emd(&a, &b).unwrap() - want).abs() <= 1e-9);
    }
}

#[test]
fn larger_instance_matches_lp() {
    let mut rng = RngStream::new(13).rng();
    let a = random_points(&mut rng, 12, false);
    let b = random_points(&mut rng, 9, false);
    assert!((emd(&a, &b).unwrap() - emd_lp(&a, &b)).abs() <= 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn metric_axioms(seed in any::<u64>(), occ in 1usize..12) {
        let mut rng = RngStream::new(seed).rng();
        let a = random_grid(&mut rng, 6, occ);
        let b = random_grid(&mut rng, 6, occ);
        let c = random_grid(&mut rng, 6, occ);
        let ab = emd(&a, &b).unwrap();
        let ba = emd(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-9);
        let ac = emd(&a, &c).unwrap();
        let bc = emd(&b, &c).unwrap();
        prop_assert!(ac <= ab + bc + 1e-9);
        prop_assert!(emd(&a, &a).unwrap() <= 1e-12);
        let same = a.weights().iter().zip(b.weights()).all(|(x, y)| (x - y).abs() <= 1e-12);
        prop_assert_eq!(ab <= 1e-12, same);
    }

    #[test]
    fn translation_of_point_mass(dx in -10.0f64..10.0, dy in -10.0f64..10.0) {
        let a = WeightedPoints::new(vec![vec![0.0, 0.0], vec![1.0, 1.0]], vec![0.3, 0.7]).unwrap();
        let b = WeightedPoints::new(vec![vec![dx, dy], vec![1.0 + dx, 1.0 + dy]], vec![0.3, 0.7]).unwrap();
        let d = emd(&a, &b).unwrap();
        prop_assert!(d <= (dx * dx + dy * dy).sqrt() + 1e-9);
    }
}

#[test]
fn mass_mismatch_is_rejected() {
    let a = WeightedPoints::new(vec![vec![0.0]], vec![1.0]).unwrap();
    let b = WeightedPoints::new(vec![vec![0.0]], vec![0.5]).unwrap();
    assert!(emd(&a, &b).is_err());
}
