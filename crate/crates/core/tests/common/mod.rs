//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use ddsmc::eval::WeightedPoints;
use rand::Rng;

/// Dense two-phase simplex with Bland's rule for
/// `min c·x  s.t.  A x = b, x >= 0` with `b >= 0`. Returns the optimum.
pub fn lp_min(a: &[Vec<f64>], b: &[f64], c: &[f64]) -> f64 {
    const EPS: f64 = 1e-12;
    let m = a.len();
    let n = c.len();
    // columns: n structural, m artificial, then rhs
    let width = n + m + 1;
    let mut t: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            let mut row = vec![0.0; width];
            row[..n].copy_from_slice(&a[i]);
            row[n + i] = 1.0;
            row[width - 1] = b[i];
            row
        })
        .collect();
    let mut basis: Vec<usize> = (n..n + m).collect();

    let pivot = |t: &mut Vec<Vec<f64>>, r: usize, col: usize| {
        let p = t[r][col];
        t[r].iter_mut().for_each(|v| *v /= p);
        let pr = t[r].clone();
        for (i, row) in t.iter_mut().enumerate() {
            if i != r && row[col] != 0.0 {
                let f = row[col];
                row.iter_mut().zip(&pr).for_each(|(v, q)| *v -= f * q);
            }
        }
    };

    let run = |t: &mut Vec<Vec<f64>>, basis: &mut Vec<usize>, cost: &[f64], allowed: usize| loop {
        // reduced costs c_j - c_B B^{-1} A_j
        let entering = (0..allowed).find(|&j| {
            if basis.contains(&j) {
                return false;
            }
            let z: f64 = (0..m).map(|i| cost[basis[i]] * t[i][j]).sum();
            cost[j] - z < -EPS
        });
        let Some(col) = entering else { return };
        let mut leave: Option<(f64, usize, usize)> = None;
        for i in 0..m {
            if t[i][col] > EPS {
                let ratio = t[i][width - 1] / t[i][col];
                let better = match leave {
                    None => true,
                    Some((r, bi, _)) => ratio < r - EPS || (ratio <= r + EPS && basis[i] < bi),
                };
                if better {
                    leave = Some((ratio, basis[i], i));
                }
            }
        }
        let (_, _, r) = leave.expect("transportation LPs are bounded");
        pivot(t, r, col);
        basis[r] = col;
    };

    let mut phase1 = vec![0.0; n + m];
    phase1[n..].iter_mut().for_each(|v| *v = 1.0);
    run(&mut t, &mut basis, &phase1, n + m);
    let infeas: f64 = (0..m).filter(|&i| basis[i] >= n).map(|i| t[i][width - 1]).sum();
    assert!(infeas < 1e-9, "infeasible LP: {infeas}");
    // drive zero-level artificials out where a structural pivot exists
    for i in 0..m {
        if basis[i] >= n {
            if let Some(j) = (0..n).find(|&j| !basis.contains(&j) && t[i][j].abs() > 1e-9) {
                pivot(&mut t, i, j);
                basis[i] = j;
            }
        }
    }
    let mut phase2 = c.to_vec();
    phase2.extend(std::iter::repeat_n(0.0, m));
    run(&mut t, &mut basis, &phase2, n);
    (0..m).map(|i| phase2[basis[i]] * t[i][width - 1]).sum()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Transportation LP between two weighted point sets of equal mass.
pub fn emd_lp(a: &WeightedPoints, b: &WeightedPoints) -> f64 {
    let (m, n) = (a.len(), b.len());
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    for i in 0..m {
        let mut r = vec![0.0; m * n];
        (0..n).for_each(|j| r[i * n + j] = 1.0);
        rows.push(r);
        rhs.push(a.weights()[i]);
    }
    for j in 0..n {
        let mut r = vec![0.0; m * n];
        (0..m).for_each(|i| r[i * n + j] = 1.0);
        rows.push(r);
        rhs.push(b.weights()[j]);
    }
    let cost: Vec<f64> = (0..m * n).map(|k| euclid(a.point(k / n), b.point(k % n))).collect();
    lp_min(&rows, &rhs, &cost)
}

/// `count` random 2D points with positive weights summing to one.
pub fn random_points<R: Rng>(rng: &mut R, count: usize, integer: bool) -> WeightedPoints {
    let pts = (0..count)
        .map(|_| {
            (0..2)
                .map(|_| {
                    if integer {
                        rng.gen_range(0..8) as f64
                    } else {
                        rng.gen_range(-5.0..5.0)
                    }
                })
                .collect()
        })
        .collect();
    let raw: Vec<f64> = (0..count).map(|_| rng.gen_range(0.05..1.0)).collect();
    let t: f64 = raw.iter().sum();
    WeightedPoints::new(pts, raw.iter().map(|w| w / t).collect()).unwrap()
}

/// Random distribution over the cells of a `side × side` grid with about
/// `occupied` nonzero cells.
pub fn random_grid<R: Rng>(rng: &mut R, side: usize, occupied: usize) -> WeightedPoints {
    let mut w = vec![0.0; side * side];
    for _ in 0..occupied {
        w[rng.gen_range(0..side * side)] += rng.gen_range(0.05..1.0);
    }
    let t: f64 = w.iter().sum();
    let pts = (0..side * side)
        .map(|k| vec![(k / side) as f64, (k % side) as f64])
        .collect();
    WeightedPoints::new(pts, w.iter().map(|x| x / t).collect()).unwrap()
}

/// Total variation between a histogram of counts and a probability table.
pub fn tv_counts(counts: &[u64], probs: &[f64]) -> f64 {
    let n: u64 = counts.iter().sum();
    0.5 * counts
        .iter()
        .zip(probs)
        .map(|(&c, &p)| (c as f64 / n as f64 - p).abs())
        .sum::<f64>()
}
