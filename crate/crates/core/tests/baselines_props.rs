use ndarray::{s, Array1, Array2};
use odflow::baselines::{calendar_predict, knn_predict, var_fit_exog, CalendarKind};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn calendar_is_exact_mean_of_past_windows(
        wpd in 1usize..5,
        n in 1usize..4,
        kind in prop::sample::select(CalendarKind::ALL.to_vec()),
        seed in any::<u64>(),
        extra in 0usize..10,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = kind.history(wpd) + extra + 1;
        let counts = Array2::from_shape_fn((t, n), |_| f64::from(rng.random_range(0u32..20)));
        let target = t - 1 - rng.random_range(0..=extra);
        let got = calendar_predict(&counts, wpd, kind, target).unwrap();
        let (step, count) = match kind {
            CalendarKind::Hourly => (1, 3),
            CalendarKind::Daily => (wpd, 7),
            CalendarKind::Weekly => (7 * wpd, 5),
        };
        for j in 0..n {
            let mean = (1..=count).map(|k| counts[[target - k * step, j]]).sum::<f64>() / count as f64;
            prop_assert!((got[j] - mean).abs() <= 1e-12);
        }
        prop_assert!(calendar_predict(&counts, wpd, kind, kind.history(wpd) - 1).is_err());
    }

    #[test]
    fn var_recovers_noiseless_driven_process(m in 1usize..4, lag in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 0.6 / (lag * m) as f64;
        let coefs: Vec<Array2<f64>> = (0..lag)
            .map(|_| Array2::from_shape_fn((m, m), |_| rng.random_range(-scale..scale)))
            .collect();
        let c = Array1::from_shape_fn(m, |_| rng.random_range(0.5..2.0));
        let g = Array2::from_shape_fn((m, m), |_| rng.random_range(-1.0..1.0));
        let t = 40 + 10 * lag * m;
        // A known driving input keeps the design well conditioned without noise.
        let drive = Array2::from_shape_fn((t, m), |_| rng.random_range(-1.0..1.0));
        let mut y = Array2::zeros((t, m));
        for i in 0..lag {
            y.row_mut(i).assign(&Array1::from_shape_fn(m, |_| rng.random_range(-3.0..3.0)));
        }
        for tau in lag..t {
            let mut v = &c + &g.dot(&drive.row(tau));
            for (i, a) in coefs.iter().enumerate() {
                v += &a.dot(&y.row(tau - 1 - i));
            }
            y.row_mut(tau).assign(&v);
        }
        let model = var_fit_exog(&y, Some(&drive), lag).unwrap();
        let close = |x: f64, e: f64| (x - e).abs() <= 1e-6 * e.abs().max(1.0);
        for (a, b) in model.coefficients.iter().zip(&coefs) {
            prop_assert!(a.iter().zip(b).all(|(&x, &e)| close(x, e)), "{a} vs {b}");
        }
        prop_assert!(model.intercept.iter().zip(&c).all(|(&x, &e)| close(x, e)));
        prop_assert!(model.exogenous.as_ref().unwrap().iter().zip(&g).all(|(&x, &e)| close(x, e)));
        let pred = model.predict(y.slice(s![t - 1 - lag..t - 1, ..]), Some(drive.row(t - 1))).unwrap();
        prop_assert!(pred.iter().zip(y.row(t - 1)).all(|(&p, &e)| close(p, e)));
    }

    #[test]
    fn knn_matches_exhaustive_oracle(
        n in 1usize..40,
        d in 1usize..5,
        k in 1usize..8,
        seed in any::<u64>(),
    ) {
        let k = k.min(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Small integer grid so distance ties are common.
        let x = Array2::from_shape_fn((n, d), |_| f64::from(rng.random_range(0u8..4)));
        let y = Array2::from_shape_fn((n, 2), |_| rng.random_range(-5.0..5.0));
        let q = Array1::from_shape_fn(d, |_| f64::from(rng.random_range(0u8..4)));
        let got = knn_predict(x.view(), y.view(), q.view(), k).unwrap();
        // Oracle: repeatedly take the lowest-index unused row at minimal distance.
        let dist: Vec<f64> = x.rows().into_iter().map(|r| r.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum()).collect();
        let mut used = vec![false; n];
        let mut sum = Array1::<f64>::zeros(2);
        for _ in 0..k {
            let mut best = None;
            for i in 0..n {
                if !used[i] && best.is_none_or(|b: usize| dist[i] < dist[b]) {
                    best = Some(i);
                }
            }
            let b = best.unwrap();
            used[b] = true;
            sum += &y.row(b);
        }
        let want = sum / k as f64;
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() <= 1e-12);
        }
    }
}
