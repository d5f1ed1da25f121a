use idfree_core::dist::EmbeddingDist;
use idfree_harness::projection::{between_within_ratio, pca2, power_iteration, project_embeddings, POWER_MAX_ITER};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scales: Vec<f64> = (0..d).map(|k| 3.0 / (k + 1) as f64).collect();
    (0..n)
        .map(|_| scales.iter().map(|s| s * rng.random_range(-1.0..1.0)).collect())
        .collect()
}

fn covariance(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let d = rows[0].len();
    let m = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = m.row_mean();
    let c = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    c.transpose() * c / n as f64
}

#[test]
fn top_two_components_match_a_dense_eigensolver() {
    let rows = random_rows(400, 6, 1);
    let (comps, vars, _) = pca2(&rows, 2).unwrap();
    let eig = SymmetricEigen::new(covariance(&rows));
    let mut order: Vec<usize> = (0..6).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    for k in 0..2 {
        let want = eig.eigenvalues[order[k]];
        assert!((vars[k] - want).abs() < 1e-6 * want, "{} vs {want}", vars[k]);
        let v = eig.eigenvectors.column(order[k]);
        let cos: f64 = comps[k].iter().zip(v.iter()).map(|(a, b)| a * b).sum();
        assert!(cos.abs() > 1.0 - 1e-6);
    }
}

#[test]
fn projecting_a_projection_is_identity_up_to_sign() {
    let rows = random_rows(200, 5, 3);
    let (_, _, pts) = pca2(&rows, 4).unwrap();
    let again: Vec<Vec<f64>> = pts.iter().map(|p| p.to_vec()).collect();
    let (_, _, twice) = pca2(&again, 5).unwrap();
    for k in 0..2 {
        let s = if pts[0][k] * twice[0][k] < 0.0 { -1.0 } else { 1.0 };
        for (a, b) in pts.iter().zip(&twice) {
            assert!((a[k] - s * b[k]).abs() < 1e-6);
        }
    }
}

#[test]
fn identical_users_mix_and_separated_users_cluster() {
    let same = vec![EmbeddingDist::gaussian(vec![0.0; 8], 0.2).unwrap(); 30];
    let p = project_embeddings(&same, 10, 1).unwrap();
    assert!(between_within_ratio(&p.points, &p.users) < 1.5);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let apart: Vec<_> = (0..30)
        .map(|_| EmbeddingDist::gaussian((0..8).map(|_| rng.random_range(-1.0..1.0)).collect(), 0.05).unwrap())
        .collect();
    let p = project_embeddings(&apart, 10, 3).unwrap();
    assert!(between_within_ratio(&p.points, &p.users) > 10.0);
}

#[test]
fn non_convergence_is_reported() {
    let m = vec![vec![1.0, 0.0], vec![0.0, -1.0]];
    assert!(power_iteration(&m, &[1.0, 1.0], 1e-9, POWER_MAX_ITER).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ratio_is_invariant_to_scaling_and_shifting(seed in any::<u64>(), scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let users: Vec<usize> = (0..60).map(|i| i / 6).collect();
        let pts: Vec<[f64; 2]> = users
            .iter()
            .map(|&u| [u as f64 * 0.3 + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let moved: Vec<[f64; 2]> = pts.iter().map(|p| [p[0] * scale + shift, p[1] * scale - shift]).collect();
        let (a, b) = (between_within_ratio(&pts, &users), between_within_ratio(&moved, &users));
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
    }
}
