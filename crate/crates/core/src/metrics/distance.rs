use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

fn check_pair(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<()> {
    if x.nrows() == 0 || y.nrows() == 0 {
        return Err(Error::contract("distance between empty clouds is undefined"));
    }
    if x.ncols() != y.ncols() {
        return Err(Error::contract(format!("dimension mismatch: {} vs {}", x.ncols(), y.ncols())));
    }
    Ok(())
}

fn check_equal_size(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<()> {
    check_pair(x, y)?;
    if x.nrows() != y.nrows() {
        return Err(Error::contract(format!(
            "EMD needs equal sizes, got {} and {}",
            x.nrows(),
            y.nrows()
        )));
    }
    Ok(())
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Squared distance from every point of `x` to every point of `y`.
fn sq_dist_matrix(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Array2<f64> {
    let xs = x.as_standard_layout();
    let ys = y.as_standard_layout();
    let d = x.ncols();
    let (xs, ys) = (xs.as_slice().unwrap(), ys.as_slice().unwrap());
    Array2::from_shape_fn((x.nrows(), y.nrows()), |(i, j)| sq_dist(&xs[i * d..(i + 1) * d], &ys[j * d..(j + 1) * d]))
}

/// Chamfer distance, sum convention with squared Euclidean distances.
/// The clouds may differ in size.
pub fn chamfer(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    check_pair(x, y)?;
    let m = sq_dist_matrix(x, y);
    let mut col_min = vec![f64::INFINITY; y.nrows()];
    let mut total = 0.0;
    for row in m.rows() {
        let mut best = f64::INFINITY;
        for (j, &v) in row.iter().enumerate() {
            best = best.min(v);
            col_min[j] = col_min[j].min(v);
        }
        total += best;
    }
    Ok(total + col_min.iter().sum::<f64>())
}

fn cost_matrix(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Array2<f64> {
    sq_dist_matrix(x, y).mapv_into(f64::sqrt)
}

/// Minimum-cost perfect matching of a square cost matrix (Hungarian method
/// with potentials, O(n^3)). Returns `assign[row] = column`.
pub fn hungarian(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "cost matrix must be square");
    // 1-based bookkeeping; index 0 is the virtual source column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[owner[j] - 1] = j - 1;
    }
    assign
}

/// Exact earth mover's distance: minimum over bijections of the summed
/// (non-squared) Euclidean distances.
pub fn emd_exact(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    check_equal_size(x, y)?;
    let c = cost_matrix(x, y);
    let assign = hungarian(&c);
    Ok(assign.iter().enumerate().map(|(i, &j)| c[[i, j]]).sum())
}

/// One auction phase at fixed `eps`, warm-started from `prices`.
fn auction_phase(c: &Array2<f64>, prices: &mut [f64], eps: f64) -> Vec<usize> {
    let n = c.nrows();
    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut assign = vec![usize::MAX; n];
    let mut queue: VecDeque<usize> = (0..n).collect();
    while let Some(i) = queue.pop_front() {
        let (mut j1, mut v1, mut v2) = (0, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for j in 0..n {
            let val = -c[[i, j]] - prices[j];
            if val > v1 {
                v2 = v1;
                v1 = val;
                j1 = j;
            } else if val > v2 {
                v2 = val;
            }
        }
        prices[j1] += v1 - v2 + eps;
        if let Some(prev) = owner[j1].replace(i) {
            assign[prev] = usize::MAX;
            queue.push_back(prev);
        }
        assign[i] = j1;
    }
    assign
}

/// Approximate EMD by the auction algorithm; the result is within
/// `n * epsilon` of the optimum.
///
/// Phases run at `C * 0.2^k` for the largest cost `C`, down to the first
/// grid value not above `epsilon`, warm-starting prices; the cheapest
/// assignment seen is returned. A smaller `epsilon` only appends phases,
/// so the result never increases as `epsilon` shrinks.
pub fn emd_approx(x: ArrayView2<f64>, y: ArrayView2<f64>, epsilon: f64) -> Result<f64> {
    check_equal_size(x, y)?;
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::contract("auction epsilon must be positive and finite"));
    }
    let n = x.nrows();
    let c = cost_matrix(x, y);
    if n == 1 {
        return Ok(c[[0, 0]]);
    }
    let top = c.iter().cloned().fold(0.0f64, f64::max);
    if top == 0.0 {
        return Ok(0.0);
    }
    let mut prices = vec![0.0; n];
    let mut best = f64::INFINITY;
    let mut eps = top;
    loop {
        let assign = auction_phase(&c, &mut prices, eps);
        let cost: f64 = assign.iter().enumerate().map(|(i, &j)| c[[i, j]]).sum();
        best = best.min(cost);
        if eps <= epsilon {
            break;
        }
        eps *= 0.2;
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn random_cloud(n: usize, d: usize, rng: &mut crate::rng::Rng) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
    }

    fn brute_chamfer(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
        let mut total = 0.0;
        for a in x.rows() {
            let mut best = f64::INFINITY;
            for b in y.rows() {
                best = best.min((&a - &b).mapv(|v| v * v).sum());
            }
            total += best;
        }
        for b in y.rows() {
            let mut best = f64::INFINITY;
            for a in x.rows() {
                best = best.min((&a - &b).mapv(|v| v * v).sum());
            }
            total += best;
        }
        total
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for k in 0..=p.len() {
                let mut q = p.clone();
                q.insert(k, n - 1);
                out.push(q);
            }
        }
        out
    }

    fn brute_emd(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
        permutations(x.nrows())
            .iter()
            .map(|p| {
                p.iter()
                    .enumerate()
                    .map(|(i, &j)| (&x.row(i) - &y.row(j)).mapv(|v| v * v).sum().sqrt())
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn chamfer_small_cases() {
        let x = array![[0.0, 0.0, 0.0]];
        let y = array![[1.0, 0.0, 0.0]];
        assert_eq!(chamfer(x.view(), y.view()).unwrap(), 2.0);
        assert_eq!(chamfer(x.view(), x.view()).unwrap(), 0.0);
        assert!(chamfer(x.view(), Array2::zeros((0, 3)).view()).is_err());
        assert!(chamfer(x.view(), Array2::zeros((1, 2)).view()).is_err());
    }

    #[test]
    fn chamfer_matches_double_loop() {
        let mut rng = crate::rng::seeded(1);
        for _ in 0..5 {
            let x = random_cloud(128, 3, &mut rng);
            let y = random_cloud(97, 3, &mut rng);
            assert!((chamfer(x.view(), y.view()).unwrap() - brute_chamfer(&x, &y)).abs() < 1e-12);
        }
    }

    #[test]
    fn emd_of_permuted_copy_is_zero() {
        let x = array![[0.0, 0.0], [1.0, 0.0]];
        let y = array![[1.0, 0.0], [0.0, 0.0]];
        assert_eq!(emd_exact(x.view(), y.view()).unwrap(), 0.0);
        assert!(emd_exact(x.view(), array![[0.0, 0.0]].view()).is_err());
    }

    #[test]
    fn hungarian_matches_factorial_search() {
        let mut rng = crate::rng::seeded(2);
        for k in 0..200 {
            let n = 1 + k % 7;
            let d = 2 + k % 2;
            let x = random_cloud(n, d, &mut rng);
            let y = random_cloud(n, d, &mut rng);
            let e = emd_exact(x.view(), y.view()).unwrap();
            assert!((e - brute_emd(&x, &y)).abs() < 1e-12, "instance {k}");
        }
    }

    #[test]
    fn auction_within_bound_of_exact() {
        let mut rng = crate::rng::seeded(3);
        let n = 64;
        for _ in 0..20 {
            let x = random_cloud(n, 3, &mut rng);
            let y = random_cloud(n, 3, &mut rng);
            let exact = emd_exact(x.view(), y.view()).unwrap();
            for eps in [1e-2, 1e-4] {
                let approx = emd_approx(x.view(), y.view(), eps).unwrap();
                assert!(approx >= exact - 1e-9);
                assert!(approx - exact <= n as f64 * eps, "{approx} vs {exact}");
            }
        }
    }

    #[test]
    fn auction_is_monotone_in_epsilon() {
        let mut rng = crate::rng::seeded(4);
        let x = random_cloud(40, 2, &mut rng);
        let y = random_cloud(40, 2, &mut rng);
        let mut last = f64::INFINITY;
        for k in 0..8 {
            let eps = 0.5 * 0.3f64.powi(k);
            let v = emd_approx(x.view(), y.view(), eps).unwrap();
            assert!(v <= last);
            last = v;
        }
    }

    #[test]
    fn auction_identical_clouds() {
        let mut rng = crate::rng::seeded(5);
        let x = random_cloud(30, 3, &mut rng);
        assert!(emd_approx(x.view(), x.view(), 1e-3).unwrap() <= 30.0 * 1e-3);
        assert!(emd_approx(x.view(), x.view(), 0.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn distances_are_symmetric_and_rotation_invariant(seed in 0u64..10_000, n in 1usize..12, angle in 0.0f64..6.3) {
            let mut rng = crate::rng::seeded(seed);
            let x = random_cloud(n, 3, &mut rng);
            let y = random_cloud(n, 3, &mut rng);
            let (s, c) = angle.sin_cos();
            let rot = array![[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
            let (xr, yr) = (x.dot(&rot.t()), y.dot(&rot.t()));
            let cd = chamfer(x.view(), y.view()).unwrap();
            let em = emd_exact(x.view(), y.view()).unwrap();
            prop_assert!(cd >= 0.0 && em >= 0.0);
            prop_assert!((cd - chamfer(y.view(), x.view()).unwrap()).abs() < 1e-12);
            prop_assert!((em - emd_exact(y.view(), x.view()).unwrap()).abs() < 1e-12);
            prop_assert!((cd - chamfer(xr.view(), yr.view()).unwrap()).abs() < 1e-9);
            prop_assert!((em - emd_exact(xr.view(), yr.view()).unwrap()).abs() < 1e-9);
            let identity: f64 = (0..n).map(|i| (&x.row(i) - &y.row(i)).mapv(|v| v * v).sum().sqrt()).sum();
            prop_assert!(em <= identity + 1e-12);
        }
    }
}
