mod common;

use common::*;
use koofu_core::classify::{nvp_classify, NeighborIndex, PrototypeMode};
use koofu_core::eval::{
    run_protocol, sweep, topk_accuracy, ClassSet, Classifier, Experiment, ProtocolConfig,
    SweepAxis, SweepBase,
};
use koofu_core::synth::{generate, SynthConfig};
use koofu_core::transform::ClassWeighting;
use koofu_core::{build_prototypes, fit_koofu, knn_classify, Metric, OutDim, ScatterStats};
use proptest::prelude::*;

fn small_synth(seed: u64) -> koofu_core::synth::SynthData {
    generate(&SynthConfig {
        classes: 8,
        dim: 16,
        train_per_class: 60,
        test_per_class: 20,
        separation: 0.25,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn shard_merge_matches_single_pass(seed in any::<u64>(), cut in 1usize..99) {
        let mut r = rng(seed);
        let ds = random_dataset(&mut r, 100, 5, 4);
        let whole = ScatterStats::from_dataset(&ds).unwrap();
        let a = ScatterStats::from_dataset(&ds.select(&(0..cut).collect::<Vec<_>>())).unwrap();
        let b = ScatterStats::from_dataset(&ds.select(&(cut..100).collect::<Vec<_>>())).unwrap();
        let m = a.merge(&b).unwrap();
        prop_assert_eq!(m.counts(), whole.counts());
        prop_assert!(rel_frob(&m.within_scatter(), &whole.within_scatter()) < 1e-10);
        prop_assert!(rel_frob(&m.second_moment().clone(), whole.second_moment()) < 1e-12);
    }

    #[test]
    fn row_permutation_leaves_stats_unchanged(seed in any::<u64>()) {
        let mut r = rng(seed);
        let ds = random_dataset(&mut r, 80, 4, 3);
        let mut order: Vec<usize> = (0..80).collect();
        order.reverse();
        order.rotate_left((seed % 80) as usize);
        let a = ScatterStats::from_dataset(&ds).unwrap();
        let b = ScatterStats::from_dataset(&ds.select(&order)).unwrap();
        prop_assert!(rel_frob(&a.within_scatter(), &b.within_scatter()) < 1e-10);
        prop_assert!(rel_frob(&a.between_scatter().unwrap(), &b.between_scatter().unwrap()) < 1e-10);
    }

    #[test]
    fn scaling_inputs_with_lambda_leaves_projection_unchanged(seed in any::<u64>(), c in 0.1f64..10.0) {
        let mut r = rng(seed);
        let ds = random_dataset(&mut r, 120, 5, 4);
        let mut scaled = ds.clone();
        scaled.embeddings = koofu_core::Embeddings::new(
            5,
            ds.embeddings.as_slice().iter().map(|&x| (x as f64 * c) as f32).collect(),
        ).unwrap();
        let lambda = 0.3;
        let t1 = fit_koofu(&ScatterStats::from_dataset(&ds).unwrap(), lambda, 3).unwrap();
        let t2 = fit_koofu(&ScatterStats::from_dataset(&scaled).unwrap(), lambda * c * c, 3).unwrap();
        let p1 = t1.apply(&ds.embeddings, false).unwrap().embeddings;
        let p2 = t2.apply(&scaled.embeddings, false).unwrap().embeddings;
        for (a, b) in p1.as_slice().iter().zip(p2.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-3 * (1.0 + a.abs()), "{} vs {}", a, b);
        }
    }

    #[test]
    fn truncation_keeps_leading_rows(seed in any::<u64>(), l in 1usize..7) {
        let mut r = rng(seed);
        let ds = random_dataset(&mut r, 90, 7, 5);
        let s = ScatterStats::from_dataset(&ds).unwrap();
        let full = fit_koofu(&s, 0.2, OutDim::Full).unwrap();
        let direct = fit_koofu(&s, 0.2, l).unwrap();
        let cut = full.truncate(l).unwrap();
        prop_assert_eq!(cut.projection(), direct.projection());
        for i in 0..l {
            for j in 0..7 {
                prop_assert_eq!(cut.projection()[(i, j)], full.projection()[(i, j)]);
            }
        }
    }

    #[test]
    fn topk_is_monotone_in_k(seed in any::<u64>()) {
        let mut r = rng(seed);
        let ds = random_dataset(&mut r, 150, 6, 10);
        let q = random_embeddings(&mut r, 30, 6);
        let gt: Vec<u32> = (0..30).map(|i| (i % 10) as u32).collect();
        let bank = build_prototypes(&ds, None, Metric::Cosine, PrototypeMode::MeanThenNormalize, None).unwrap().bank;
        let ranked = nvp_classify(&q, &bank, 10).unwrap();
        let accs: Vec<f64> = (1..=10).map(|k| topk_accuracy(&ranked, &gt, k).unwrap().value).collect();
        prop_assert!(accs.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(accs[9], 1.0);
    }
}

#[test]
fn distractors_never_raise_top1() {
    let data = small_synth(3);
    let exp = Experiment::new(&data.train, &data.test);
    let keep: Vec<usize> = (0..data.test.len())
        .filter(|&i| data.test.labels[i] < 4)
        .collect();
    let queries = data.test.select(&keep);
    let exp_in = Experiment {
        queries: &queries,
        ..exp
    };
    for classifier in [Classifier::Nvp, Classifier::Knn { k: 5 }] {
        let mut prev = f64::INFINITY;
        for extra in [4u32, 6, 8] {
            let cfg = ProtocolConfig {
                classifier,
                class_set: Some(ClassSet {
                    tag: format!("{extra}"),
                    ids: (0..extra).collect(),
                }),
                top_k: 1,
                ..ProtocolConfig::default()
            };
            let acc = run_protocol(&exp_in, None, &cfg)
                .unwrap()
                .metrics
                .unwrap()
                .top1
                .value;
            assert!(
                acc <= prev,
                "{classifier:?} with {extra} classes: {acc} > {prev}"
            );
            prev = acc;
        }
    }
}

#[test]
fn protocol_is_deterministic_and_exact() {
    let data = small_synth(4);
    let exp = Experiment::new(&data.train, &data.test);
    let t = fit_koofu(
        &ScatterStats::from_dataset(&data.train).unwrap(),
        1.0,
        OutDim::Full,
    )
    .unwrap();
    for cfg in [
        ProtocolConfig::default(),
        ProtocolConfig {
            classifier: Classifier::Knn { k: 15 },
            ..ProtocolConfig::default()
        },
    ] {
        let a = run_protocol(&exp, Some(&t), &cfg).unwrap();
        let b = run_protocol(&exp, Some(&t), &cfg).unwrap();
        assert_eq!(a.without_timings(), b.without_timings());
        let m = a.metrics.unwrap();
        for acc in m.per_k.iter().map(|p| p.accuracy).chain([m.top1]) {
            assert_eq!(acc.value, acc.numerator as f64 / acc.denominator as f64);
        }
        assert_eq!(a.resources.unwrap().search_repeats, 3);
    }
}

#[test]
fn single_class_bank_scores_its_share() {
    let data = small_synth(5);
    let exp = Experiment::new(&data.train, &data.test);
    let cfg = ProtocolConfig {
        top_k: 1,
        class_set: Some(ClassSet {
            tag: "one".into(),
            ids: vec![2],
        }),
        ..ProtocolConfig::default()
    };
    let m = run_protocol(&exp, None, &cfg).unwrap().metrics.unwrap();
    let share = data.test.labels.iter().filter(|&&l| l == 2).count() as u64;
    assert_eq!(
        (m.top1.numerator, m.top1.denominator),
        (share, data.test.len() as u64)
    );
}

#[test]
fn results_independent_of_thread_count() {
    let data = small_synth(6);
    let one = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let four = rayon::ThreadPoolBuilder::new()
        .num_threads(4)
        .build()
        .unwrap();
    let run = |pool: &rayon::ThreadPool| {
        pool.install(|| {
            let s = ScatterStats::from_dataset(&data.train).unwrap();
            let t = fit_koofu(&s, 1.0, OutDim::Full).unwrap();
            let p = t.apply(&data.test.embeddings, true).unwrap().embeddings;
            let ix = NeighborIndex::from_dataset(&data.train, Metric::Cosine).unwrap();
            let k = knn_classify(&data.test.embeddings, &ix, 15).unwrap();
            (s, t.projection().clone(), p, k)
        })
    };
    let (s1, t1, p1, k1) = run(&one);
    let (s4, t4, p4, k4) = run(&four);
    assert_eq!(s1, s4);
    assert_eq!(t1, t4);
    assert_eq!(p1, p4);
    assert_eq!(k1, k4);
}

fn sweep_base(lambda: Option<f64>) -> SweepBase {
    SweepBase {
        lambda,
        out_dim: OutDim::Full,
        weighting: ClassWeighting::Count,
        protocol: ProtocolConfig::default(),
    }
}

#[test]
fn out_dim_sweep_reuses_fit_and_is_idempotent() {
    let data = small_synth(7);
    let exp = Experiment::new(&data.train, &data.test);
    let s = ScatterStats::from_dataset(&data.train).unwrap();
    let reports = sweep(
        &exp,
        &s,
        &sweep_base(Some(1.0)),
        SweepAxis::OutDim,
        &[16.0, 16.0, 7.0, 3.0, 1.0],
    )
    .unwrap();
    assert_eq!(reports.len(), 5);
    assert_eq!(reports[0].without_timings(), reports[1].without_timings());
    let top1: Vec<f64> = reports
        .iter()
        .map(|r| r.metrics.as_ref().unwrap().top1.value)
        .collect();
    // below the between-class rank K-1 = 7 accuracy does not increase
    assert!(top1[2] >= top1[3] && top1[3] >= top1[4], "{top1:?}");
    assert_eq!(reports[3].config.out_dim, 3);
}

#[test]
fn single_point_sweep_equals_protocol() {
    let data = small_synth(8);
    let exp = Experiment::new(&data.train, &data.test);
    let s = ScatterStats::from_dataset(&data.train).unwrap();
    let swept = sweep(&exp, &s, &sweep_base(None), SweepAxis::Lambda, &[2.0]).unwrap();
    let t = fit_koofu(&s, 2.0, OutDim::Full).unwrap();
    let direct = run_protocol(&exp, Some(&t), &ProtocolConfig::default()).unwrap();
    assert_eq!(swept[0].without_timings(), direct.without_timings());
}

#[test]
fn sweep_records_failures_and_continues() {
    let data = small_synth(9);
    let exp = Experiment::new(&data.train, &data.test);
    let s = ScatterStats::from_dataset(&data.train).unwrap();
    let reports = sweep(&exp, &s, &sweep_base(None), SweepAxis::Lambda, &[-1.0, 1.0]).unwrap();
    assert!(reports[0].error.is_some() && reports[0].metrics.is_none());
    assert!(reports[0].error.as_ref().unwrap().starts_with("fit"));
    assert!(reports[1].error.is_none());

    let ks = sweep(
        &exp,
        &s,
        &sweep_base(None),
        SweepAxis::K,
        &[1.0, 5.0, 100_000.0],
    )
    .unwrap();
    assert_eq!(ks[0].config.k, 1);
    assert!(ks[2].error.is_some());
    assert!(sweep(&exp, &s, &sweep_base(None), SweepAxis::K, &[]).is_err());
}
