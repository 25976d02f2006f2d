mod rng {
    use prefdiff::rng::*;
    use rand::RngCore;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a = stream("curate/42/item/17").next_u64();
        assert_eq!(a, stream("curate/42/item/17").next_u64());
        assert_ne!(a, stream("curate/42/item/18").next_u64());
        assert_eq!(a, item_stream("curate", 42, "item", 17).next_u64());
    }
}

mod stats {
    use prefdiff::stats::*;

    #[test]
    fn welford_matches_two_pass() {
        let xs = [1.0, 4.0, -2.0, 7.5, 3.25];
        let w: Welford = xs.iter().copied().collect();
        let mean = xs.iter().sum::<f64>() / 5.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert!((w.mean() - mean).abs() < 1e-15);
        assert!((w.variance() - var).abs() < 1e-12);
        let c: Welford = std::iter::repeat_n(0.3, 10).collect();
        assert_eq!(c.mean(), 0.3);
        assert_eq!(c.variance(), 0.0);
    }
}
