use actionguide::metrics::{diversity, fid, fid_from_moments, mm_dist, moments, multimodality, r_precision, DEFAULT_POOL};
use actionguide::rng::{normal_mat, stream};
use actionguide::tensor::Mat;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Cyclic Jacobi eigendecomposition of a symmetric matrix, as row-major
/// `Vec<Vec<f64>>`. Returns eigenvalues and column eigenvectors.
fn jacobi(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut a = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vkp, vkq) = (row[p], row[q]);
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

fn mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    (0..n).map(|i| (0..n).map(|j| (0..n).map(|k| a[i][k] * b[k][j]).sum()).collect()).collect()
}

fn sqrt_psd(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (vals, vecs) = jacobi(m);
    let n = m.len();
    (0..n).map(|i| (0..n).map(|j| (0..n).map(|k| vecs[i][k] * vals[k].max(0.0).sqrt() * vecs[j][k]).sum()).collect()).collect()
}

fn fid_oracle(mu_a: &[f64], ca: &[Vec<f64>], mu_b: &[f64], cb: &[Vec<f64>]) -> f64 {
    let ra = sqrt_psd(ca);
    let inner = mul(&mul(&ra, cb), &ra);
    let sym: Vec<Vec<f64>> = (0..inner.len()).map(|i| (0..inner.len()).map(|j| 0.5 * (inner[i][j] + inner[j][i])).collect()).collect();
    let tr_sqrt: f64 = jacobi(&sym).0.iter().map(|l| l.max(0.0).sqrt()).sum();
    let dmu: f64 = mu_a.iter().zip(mu_b).map(|(a, b)| (a - b) * (a - b)).sum();
    let tr = |c: &[Vec<f64>]| (0..c.len()).map(|i| c[i][i]).sum::<f64>();
    dmu + tr(ca) + tr(cb) - 2.0 * tr_sqrt
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

#[test]
fn fid_of_a_set_with_itself_vanishes() {
    for (n, d) in [(200, 6), (40, 12), (5, 3)] {
        let a = normal_mat(&mut stream(21, n as u64), n, d);
        assert!(fid(&a, &a).unwrap().abs() < 1e-8, "n={n} d={d}");
    }
}

#[test]
fn gaussian_closed_form() {
    let d = 4;
    let mu_a = DVector::zeros(d);
    let mu_b = DVector::from_vec(vec![3.0, 4.0, 0.0, 0.0]);
    let id = DMatrix::identity(d, d);
    assert!((fid_from_moments(&mu_a, &id, &mu_b, &id) - 25.0).abs() < 1e-6);
    // Scaled covariances: ‖μ‖² + d(σ_a − σ_b)².
    let fid2 = fid_from_moments(&mu_a, &(&id * 4.0), &mu_b, &(&id * 9.0));
    assert!((fid2 - (25.0 + 4.0)).abs() < 1e-9);
}

#[test]
fn random_psd_cases_match_jacobi_oracle() {
    for seed in 0..20u64 {
        let d = 2 + (seed as usize % 6);
        let mut rng = stream(22, seed);
        let xa = normal_mat(&mut rng, d, d + 2);
        let xb = normal_mat(&mut rng, d, d + 2);
        let ca = DMatrix::from_row_slice(d, d, xa.matmul_t(&xa).data());
        let cb = DMatrix::from_row_slice(d, d, xb.matmul_t(&xb).data());
        let ma = normal_mat(&mut rng, 1, d);
        let mb = normal_mat(&mut rng, 1, d);
        let got = fid_from_moments(&DVector::from_row_slice(ma.data()), &ca, &DVector::from_row_slice(mb.data()), &cb);
        let want = fid_oracle(ma.data(), &to_rows(&ca), mb.data(), &to_rows(&cb));
        assert!((got - want).abs() < 1e-8 * (1.0 + want.abs()), "seed {seed}: {got} vs {want}");
        // Oracle is symmetric too.
        let swapped = fid_oracle(mb.data(), &to_rows(&cb), ma.data(), &to_rows(&ca));
        assert!((swapped - want).abs() < 1e-8 * (1.0 + want.abs()));
    }
}

#[test]
fn sample_moments_match_definition() {
    let x = normal_mat(&mut stream(23, 0), 30, 3);
    let (mu, cov) = moments(&x).unwrap();
    for c in 0..3 {
        let m: f64 = (0..30).map(|r| x.get(r, c)).sum::<f64>() / 30.0;
        assert!((mu[c] - m).abs() < 1e-12);
        for c2 in 0..3 {
            let m2: f64 = (0..30).map(|r| x.get(r, c2)).sum::<f64>() / 30.0;
            let v: f64 = (0..30).map(|r| (x.get(r, c) - m) * (x.get(r, c2) - m2)).sum::<f64>() / 29.0;
            assert!((cov[(c, c2)] - v).abs() < 1e-12);
        }
    }
    assert!(moments(&Mat::zeros(1, 3)).is_err());
}

#[test]
fn random_features_retrieve_at_chance() {
    let repeats = 50;
    let tops: Vec<[f64; 3]> = (0..repeats)
        .map(|r| {
            let mut rng = stream(24, r);
            let text = normal_mat(&mut rng, 256, 8);
            let motion = normal_mat(&mut rng, 256, 8);
            r_precision(&text, &motion, DEFAULT_POOL, &mut rng).unwrap()
        })
        .collect();
    let top1: Vec<f64> = tops.iter().map(|t| t[0]).collect();
    let mean = top1.iter().sum::<f64>() / repeats as f64;
    let sd = (top1.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (repeats as f64 - 1.0)).sqrt();
    let se = sd / (repeats as f64).sqrt();
    let chance = 1.0 / DEFAULT_POOL as f64;
    assert!((mean - chance).abs() < 3.0 * se, "mean {mean} chance {chance} se {se}");
    assert!(tops.iter().all(|t| t[0] <= t[1] && t[1] <= t[2]));
}

#[test]
fn mm_dist_matches_row_distances() {
    let mut rng = stream(25, 0);
    let a = normal_mat(&mut rng, 12, 5);
    let b = normal_mat(&mut rng, 12, 5);
    let want: f64 = (0..12).map(|i| (0..5).map(|c| (a.get(i, c) - b.get(i, c)).powi(2)).sum::<f64>().sqrt()).sum::<f64>() / 12.0;
    assert!((mm_dist(&a, &b).unwrap() - want).abs() < 1e-12);
    assert!(mm_dist(&a, &Mat::zeros(11, 5)).is_err());
}

#[test]
fn diversity_reflects_spread() {
    let mut rng = stream(26, 0);
    // Two clusters 10 apart; disjoint random halves mix them.
    let f = Mat::from_fn(200, 2, |i, c| if c == 0 { if i % 2 == 0 { 0.0 } else { 10.0 } } else { 0.0 });
    let div = diversity(&f, 50, &mut rng).unwrap();
    assert!(div > 2.0 && div < 8.0, "{div}");
    let tight = f.scale(0.01);
    assert!(diversity(&tight, 50, &mut stream(26, 0)).unwrap() < div);
    assert!(diversity(&f, 101, &mut rng).is_err());
}

#[test]
fn multimodality_matches_brute_force() {
    let mut rng = stream(27, 0);
    let groups: Vec<Mat> = (0..7).map(|_| normal_mat(&mut rng, 6, 4)).collect();
    let mut total = 0.0;
    let mut count = 0;
    for g in &groups {
        for i in 0..3 {
            total += (0..4).map(|c| (g.get(2 * i, c) - g.get(2 * i + 1, c)).powi(2)).sum::<f64>().sqrt();
            count += 1;
        }
    }
    assert!((multimodality(&groups, 3).unwrap() - total / count as f64).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fid_is_symmetric_and_rotation_invariant(seed in 0u64..100_000, angle in 0.0f64..std::f64::consts::TAU) {
        let mut rng = stream(seed, 0);
        let a = normal_mat(&mut rng, 60, 2);
        let b = normal_mat(&mut rng, 60, 2).scale(1.5).add(&Mat::filled(60, 2, 0.3));
        let ab = fid(&a, &b).unwrap();
        prop_assert!((ab - fid(&b, &a).unwrap()).abs() < 1e-8 * (1.0 + ab));
        prop_assert!(ab >= -1e-9);
        let rot = Mat::from_rows(&[vec![angle.cos(), -angle.sin()], vec![angle.sin(), angle.cos()]]);
        let rotated = fid(&a.matmul(&rot), &b.matmul(&rot)).unwrap();
        prop_assert!((ab - rotated).abs() < 1e-8 * (1.0 + ab));
    }

    #[test]
    fn retrieval_ranks_are_nested(seed in 0u64..100_000) {
        let mut rng = stream(seed, 1);
        let text = normal_mat(&mut rng, 40, 3);
        let motion = text.add(&normal_mat(&mut rng, 40, 3).scale(0.8));
        let r = r_precision(&text, &motion, DEFAULT_POOL, &mut rng).unwrap();
        prop_assert!(r[0] <= r[1] && r[1] <= r[2] && r[2] <= 1.0);
        prop_assert_eq!(r_precision(&text, &text, DEFAULT_POOL, &mut rng).unwrap(), [1.0, 1.0, 1.0]);
    }
}
