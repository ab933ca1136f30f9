use ltsfs::linalg::thin_svd_left;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// One-sided Jacobi: rotates column pairs of `a` until mutually orthogonal.
/// Returns the normalized columns and their norms, sorted by norm.
fn jacobi_left(mut a: Vec<Vec<f64>>) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = a.len();
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = a[p].iter().map(|x| x * x).sum();
                let beta: f64 = a[q].iter().map(|x| x * x).sum();
                let gamma: f64 = a[p].iter().zip(&a[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..a[p].len() {
                    let (x, y) = (a[p][i], a[q][i]);
                    a[p][i] = c * x - s * y;
                    a[q][i] = s * x + c * y;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut cols: Vec<(f64, Vec<f64>)> = a
        .into_iter()
        .map(|c| {
            let n = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            (n, c.into_iter().map(|x| x / n).collect())
        })
        .collect();
    cols.sort_by(|x, y| y.0.total_cmp(&x.0));
    let sigma = cols.iter().map(|c| c.0).collect();
    (cols.into_iter().map(|c| c.1).collect(), sigma)
}

/// Largest principal angle between the spans of two orthonormal pairs.
fn max_principal_angle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let d = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    let m = [[d(&a[0], &b[0]), d(&a[0], &b[1])], [d(&a[1], &b[0]), d(&a[1], &b[1])]];
    // singular values of the 2x2 overlap via the eigenvalues of MᵀM
    let g00 = m[0][0] * m[0][0] + m[1][0] * m[1][0];
    let g11 = m[0][1] * m[0][1] + m[1][1] * m[1][1];
    let g01 = m[0][0] * m[0][1] + m[1][0] * m[1][1];
    let tr = g00 + g11;
    let det = g00 * g11 - g01 * g01;
    let lo = 0.5 * (tr - (tr * tr - 4.0 * det).max(0.0).sqrt());
    lo.max(0.0).sqrt().min(1.0).acos()
}

#[test]
fn power_iteration_matches_jacobi_subspace() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cols: Vec<Vec<f64>> = (0..8)
        .map(|_| (0..16).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let got = thin_svd_left(&cols, 2, 1e-13, 100_000);
    let (u, sigma) = jacobi_left(cols);
    assert_eq!(got.u.len(), 2);
    for i in 0..2 {
        assert!(
            (got.sigma[i] - sigma[i]).abs() <= 1e-8 * sigma[0],
            "{:?} vs {:?}",
            got.sigma,
            sigma
        );
    }
    let angle = max_principal_angle(&got.u, &u[..2]);
    assert!(angle <= 1e-4, "principal angle {angle}");
}

#[test]
fn rank_deficient_input_stops_early() {
    let v: Vec<f64> = (0..16).map(|i| i as f64 - 7.5).collect();
    let cols: Vec<Vec<f64>> = (1..=5).map(|k| v.iter().map(|x| x * k as f64).collect()).collect();
    let got = thin_svd_left(&cols, 3, 1e-12, 1000);
    assert_eq!(got.u.len(), 1);
    let (u, sigma) = jacobi_left(cols);
    assert!((got.sigma[0] - sigma[0]).abs() <= 1e-9 * sigma[0]);
    let cos: f64 = got.u[0].iter().zip(&u[0]).map(|(a, b)| a * b).sum();
    assert!((cos.abs() - 1.0).abs() < 1e-12);
}
