mod common;

use common::gaussian_points;
use learnroute::data::{
    exact_knn, generate_synthetic, l2_squared, load_fvecs, load_ivecs, pca_fit, pca_transform, write_fvecs,
    write_ivecs, VectorDataset,
};
use learnroute::eval::recall_at_r;
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f32>> {
    proptest::collection::vec(-1e6f32..1e6, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fvecs_round_trip((r, c) in (0usize..20, 1usize..17), seed in any::<u64>()) {
        let m = gaussian_points(r, c, seed);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.fvecs");
        write_fvecs(&p, m.view()).unwrap();
        let back = load_fvecs(&p).unwrap();
        prop_assert_eq!(back.nrows(), r);
        if r > 0 {
            prop_assert_eq!(back, m);
        }
    }

    #[test]
    fn fvecs_keeps_arbitrary_values(m in (1usize..8, 1usize..8).prop_flat_map(|(r, c)| matrix(r, c))) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.fvecs");
        write_fvecs(&p, m.view()).unwrap();
        prop_assert_eq!(load_fvecs(&p).unwrap(), m);
    }

    #[test]
    fn ivecs_round_trip(v in proptest::collection::vec(any::<i32>(), 1..60), c in 1usize..6) {
        let r = v.len() / c;
        prop_assume!(r > 0);
        let m = Array2::from_shape_vec((r, c), v[..r * c].to_vec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ivecs");
        write_ivecs(&p, m.view()).unwrap();
        prop_assert_eq!(load_ivecs(&p).unwrap(), m);
    }

    #[test]
    fn exact_knn_matches_sorting(seed in any::<u64>(), r in 1usize..6) {
        let base = gaussian_points(50, 5, seed);
        let q = gaussian_points(8, 5, seed ^ 1);
        let gt = exact_knn(base.view(), q.view(), r).unwrap();
        for (i, qr) in q.outer_iter().enumerate() {
            let mut all: Vec<(f32, u32)> = base
                .outer_iter()
                .enumerate()
                .map(|(j, b)| (l2_squared(b.as_slice().unwrap(), qr.as_slice().unwrap()), j as u32))
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let want: Vec<u32> = all[..r].iter().map(|x| x.1).collect();
            prop_assert_eq!(gt.top(i).to_vec(), want);
        }
    }

    #[test]
    fn recall_is_monotone_in_r(seed in any::<u64>()) {
        let base = gaussian_points(60, 4, seed);
        let q = gaussian_points(10, 4, seed ^ 9);
        let gt = exact_knn(base.view(), q.view(), 1).unwrap();
        // a deliberately scrambled ranking
        let ranked: Vec<Vec<u32>> = (0..10u32).map(|i| (0..60u32).map(|j| (j * 7 + i * 13) % 60).collect()).collect();
        let mut last = 0.0;
        for r in 1..=60 {
            let x = recall_at_r(&ranked, &gt, r);
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert!(x >= last);
            last = x;
        }
        prop_assert_eq!(last, 1.0);
    }
}

#[test]
fn synthetic_rows_and_shapes() {
    let a = generate_synthetic(1000, 16, 8, 4).unwrap();
    assert_eq!(a, generate_synthetic(1000, 16, 8, 4).unwrap());
    assert_ne!(a, generate_synthetic(1000, 16, 8, 5).unwrap());
    assert_eq!((a.base.nrows(), a.train_queries.nrows(), a.test_queries.nrows()), (800, 100, 100));
    let dir = tempfile::tempdir().unwrap();
    a.save_to_dir(dir.path()).unwrap();
    assert_eq!(VectorDataset::load_from_dir(dir.path()).unwrap(), a);
}

/// Leading eigenpairs by power iteration with deflation.
fn power_eigen(cov: &Array2<f64>, k: usize) -> Vec<(f64, Array1<f64>)> {
    let n = cov.nrows();
    let mut a = cov.clone();
    let mut out = Vec::new();
    for t in 0..k {
        let mut v = Array1::from_shape_fn(n, |i| 1.0 + ((i + t) % 3) as f64);
        let mut lambda = 0.0;
        for _ in 0..5000 {
            let w = a.dot(&v);
            let norm = w.dot(&w).sqrt();
            v = w / norm;
            lambda = norm;
        }
        let outer = v.view().insert_axis(ndarray::Axis(1)).dot(&v.view().insert_axis(ndarray::Axis(0)));
        a = a - outer * lambda;
        out.push((lambda, v));
    }
    out
}

#[test]
fn pca_agrees_with_power_iteration() {
    // anisotropic data with well separated variances
    let mut x = gaussian_points(2000, 6, 11);
    for (j, s) in [5.0f32, 3.0, 2.0, 1.0, 0.5, 0.25].iter().enumerate() {
        x.column_mut(j).mapv_inplace(|v| v * s);
    }
    // rotate so the axes are not coordinate-aligned
    let r = {
        let q = gaussian_points(6, 6, 12).mapv(|v| v as f64);
        let m = nalgebra::DMatrix::from_fn(6, 6, |i, j| q[[i, j]]);
        let qr = m.qr().q();
        Array2::from_shape_fn((6, 6), |(i, j)| qr[(i, j)])
    };
    let x = x.mapv(|v| v as f64).dot(&r).mapv(|v| v as f32);

    let model = pca_fit(x.view(), 3).unwrap();
    let xd = x.mapv(|v| v as f64);
    let mean = xd.mean_axis(ndarray::Axis(0)).unwrap();
    let c = &xd - &mean;
    let cov = c.t().dot(&c) / x.nrows() as f64;
    for (i, (lambda, v)) in power_eigen(&cov, 3).into_iter().enumerate() {
        assert!((model.explained_variance[i] - lambda).abs() < 1e-6 * lambda, "eigenvalue {i}");
        let align = model.components.row(i).dot(&v).abs();
        assert!((align - 1.0).abs() < 1e-6, "component {i} alignment {align}");
    }
    // rows orthonormal
    let g = model.components.dot(&model.components.t());
    for i in 0..3 {
        for j in 0..3 {
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((g[[i, j]] - want).abs() < 1e-9);
        }
    }
    let y = pca_transform(&model, x.view()).unwrap();
    let back = model.inverse_transform(y.view());
    assert_eq!(back.dim(), x.dim());
    assert!((model.compression_rate() - 2.0).abs() < 1e-12);
}
