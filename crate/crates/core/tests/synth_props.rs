use chrono::TimeDelta;
use odflow::cluster::{filter_insignificant, kmeans_4d};
use odflow::series::aggregate_od_series;
use odflow::synth::{generate_city, CityConfig};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn counts_plus_dropped_equal_total(
        seed in any::<u64>(),
        pairs in 1usize..5,
        k in 2usize..10,
        min_travels in 1usize..40,
        window in prop::sample::select(vec![30i64, 60]),
    ) {
        let cfg = CityConfig::synthetic(pairs, 3, 400.0, seed);
        let (trips, _) = generate_city(&cfg).unwrap();
        prop_assume!(trips.len() >= k);
        let model = kmeans_4d(&trips, k, seed).unwrap();
        let (model, _) = filter_insignificant(&model, min_travels);
        let ids = model.assign_trips(&trips);
        let series = aggregate_od_series(&trips, &ids, model.n_flows(), cfg.start, cfg.end(), TimeDelta::minutes(window)).unwrap();
        let dropped = ids.iter().filter(|i| i.is_none()).count();
        prop_assert_eq!(series.counts.sum() as usize + dropped, trips.len());
        let kept: usize = model.retained.iter().map(|&r| model.counts[r]).sum();
        prop_assert_eq!(kept + dropped, trips.len());
    }

    #[test]
    fn seeds_are_reproducible_and_distinct(seed in any::<u64>()) {
        let a = generate_city(&CityConfig::synthetic(3, 2, 300.0, seed)).unwrap();
        let b = generate_city(&CityConfig::synthetic(3, 2, 300.0, seed)).unwrap();
        prop_assert_eq!(&a.0, &b.0);
        prop_assert_eq!(&a.1.values, &b.1.values);
        let c = generate_city(&CityConfig::synthetic(3, 2, 300.0, seed.wrapping_add(1))).unwrap();
        prop_assert_ne!(&a.0, &c.0);
    }
}
