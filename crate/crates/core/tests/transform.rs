mod common;

use actcomp::tensor::Tensor;
use actcomp::transform::{fit_pca, TransformCache};
use common::{correlated, truncation_error};

fn channel_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d, h, w) = x.dims4().unwrap();
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut mean = vec![0.0; d];
    for b in 0..n {
        for (c, m) in mean.iter_mut().enumerate() {
            *m += x.data()[(b * d + c) * hw..][..hw].iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut cov = vec![0.0; d * d];
    for b in 0..n {
        for p in 0..hw {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += (x.data()[(b * d + i) * hw + p] as f64 - mean[i])
                        * (x.data()[(b * d + j) * hw + p] as f64 - mean[j]);
                }
            }
        }
    }
    cov.iter_mut().for_each(|v| *v /= m);
    (mean, cov)
}

#[test]
fn decorrelated_input_gives_signed_permutation() {
    let x = Tensor::new(
        vec![4, 2, 1, 1],
        vec![2.0, 1.0, 2.0, -1.0, -2.0, 1.0, -2.0, -1.0],
    )
    .unwrap();
    let c = fit_pca(0, &x).unwrap();
    assert!((c.eigenvalues[0] - 4.0).abs() < 1e-4);
    assert!((c.eigenvalues[1] - 1.0).abs() < 1e-4);
    let u = c.basis.data();
    assert!((u[0].abs() - 1.0).abs() < 1e-4 && u[1].abs() < 1e-4);
    assert!(u[2].abs() < 1e-4 && (u[3].abs() - 1.0).abs() < 1e-4);
}

#[test]
fn rank_one_data_has_null_second_eigenvalue() {
    let x = Tensor::from_fn(&[10, 2, 1, 1], |i| {
        let t = (i / 2) as f32 - 4.5;
        if i % 2 == 0 { t } else { -0.5 * t }
    });
    let c = fit_pca(0, &x).unwrap();
    assert!(c.eigenvalues[0] > 1.0);
    assert!(c.eigenvalues[1].abs() < 1e-5);
}

#[test]
fn transform_diagonalizes_and_round_trips() {
    let x = correlated(11, 16, 8, 4, 4);
    let c = fit_pca(0, &x).unwrap();
    assert!(c.orthogonality_error() < 1e-5);
    for w in c.eigenvalues.windows(2) {
        assert!(w[0] >= w[1]);
    }
    let y = c.apply(&x).unwrap();
    let (mean, cov) = channel_stats(&y);
    let d = 8;
    for i in 0..d {
        assert!(mean[i].abs() < 1e-4);
        for j in 0..d {
            if i != j {
                assert!(cov[i * d + j].abs() < 1e-4, "cov[{i},{j}] = {}", cov[i * d + j]);
            }
        }
        let ev = c.eigenvalues[i] as f64;
        assert!((cov[i * d + i] - ev).abs() <= 0.05 * ev + 1e-7, "variance {i}");
    }
    let back = c.invert(&y).unwrap();
    for (a, b) in back.data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn identity_transform_and_energy() {
    let x = correlated(12, 3, 5, 2, 3);
    let id = TransformCache::identity(0, 5);
    assert_eq!(id.apply(&x).unwrap(), x);

    let c = fit_pca(0, &x).unwrap();
    let y = c.apply(&x).unwrap();
    let (n, d, h, w) = x.dims4().unwrap();
    let hw = h * w;
    let mut centered = 0.0f64;
    for b in 0..n {
        for ch in 0..d {
            for p in 0..hw {
                centered += ((x.data()[(b * d + ch) * hw + p] - c.mean[ch]) as f64).powi(2);
            }
        }
    }
    let energy: f64 = y.data().iter().map(|&v| (v as f64).powi(2)).sum();
    assert!((energy - centered).abs() < 1e-4 * centered.max(1.0));
}

#[test]
fn inverse_of_zero_is_zero() {
    let mut c = fit_pca(0, &correlated(13, 4, 4, 2, 2)).unwrap();
    c.mean = vec![0.0; 4];
    let z = Tensor::zeros(&[2, 4, 3, 3]);
    assert!(c.invert(&z).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn trailing_channel_energy_matches_eigenvalues() {
    for (seed, d) in [(14u64, 8usize), (15, 12)] {
        let x = correlated(seed, 20, d, 4, 4);
        let c = fit_pca(0, &x).unwrap();
        let m = c.sample_count as f64;
        for k in 1..d {
            let err = truncation_error(&x, &c, d - k);
            let want: f64 = c.eigenvalues[d - k..].iter().map(|&v| v as f64).sum::<f64>() * m;
            assert!((err - want).abs() <= 0.05 * want + 1e-6, "k={k}: {err} vs {want}");
        }
    }
}
