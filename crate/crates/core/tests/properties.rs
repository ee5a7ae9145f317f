use std::collections::{BTreeMap, BTreeSet};

use cpt_core::budget;
use cpt_core::data::{Concept, ConceptId, PoolTag, Sample};
use cpt_core::methods::{self, MethodKind};
use cpt_core::mixture::{allocate, target_counts, MixtureRatios, Pools};
use cpt_core::model::{self, clip_grad_norm, ParamSet, Tensor};
use cpt_core::schedules::{self, MetaVariant, ScheduleConfig, ScheduleKind, ScheduleParams};
use cpt_core::streams::{self, Inventory, OrderingKind};
use ndarray::Array2;
use proptest::prelude::*;

fn ratios() -> impl Strategy<Value = MixtureRatios> {
    (0.0..=1.0f64, 0.0..=1.0f64).prop_map(|(a, b)| {
        let (lo, hi) = (a.min(b), a.max(b));
        MixtureRatios::new(lo, hi - lo, 1.0 - hi).unwrap()
    })
}

fn inventory(n: usize, seed: u64) -> Inventory {
    let concepts = (0..n)
        .map(|i| {
            let h = (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ seed;
            Concept {
                id: ConceptId(i as u32 * 2),
                dataset_id: (h % 3) as u32,
                year: 2010 + (h % 7) as i32,
                frequency: h % 1000,
                difficulty: Some((h % 997) as f64 / 997.0),
            }
        })
        .collect();
    let feats = Array2::from_shape_fn((n, 3), |(i, j)| (((i * 7 + j * 13) as u64 ^ seed) % 11) as f64 - 5.0 + 0.1 * j as f64);
    let sim = streams::cosine_similarity(&feats);
    Inventory {
        concepts,
        similarity: Some(sim.outer_iter().map(|r| r.to_vec()).collect()),
    }
}

fn params_with(values: &[f64]) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert("a", Tensor::new(vec![values.len()], values.to_vec()).unwrap());
    p
}

proptest! {
    #[test]
    fn steps_shrink_with_cost_and_task_count(
        maf in 1.0..1e7f64,
        extra in 0.0..1e6f64,
        t in 1u64..300,
        dt in 0u64..50,
    ) {
        let total = 1.8e9;
        let s = budget::steps_per_task(total, t, maf).unwrap();
        prop_assert!(budget::steps_per_task(total, t, maf + extra).unwrap() <= s);
        prop_assert!(budget::steps_per_task(total, t + dt, maf).unwrap() <= s);
        prop_assert!(s as f64 * maf <= total / t as f64 + 1e-6);
        prop_assert!((s + 1) as f64 * maf > total / t as f64);
    }

    #[test]
    fn learning_rates_stay_in_range(
        eta_max in 1e-6..1e-1f64,
        n_task in 2u64..3000,
        warm in 0.01..0.5f64,
        cool in 0.0..0.5f64,
        continuous in any::<bool>(),
    ) {
        let cfg = ScheduleConfig {
            eta_min: 0.0,
            eta_max,
            warmup_fraction: warm,
            cooldown_fraction: cool,
            continuous_rsqrt: continuous,
        };
        let p = cfg.params_for(n_task).unwrap();
        for kind in [ScheduleKind::Cosine, ScheduleKind::Rsqrt] {
            let lrs: Vec<f64> = (0..=n_task).map(|n| kind.lr(n, &p).unwrap()).collect();
            prop_assert!(lrs.iter().all(|&x| (0.0..=eta_max * (1.0 + 1e-12)).contains(&x)));
            let step = eta_max / p.n_warm as f64;
            for n in 1..p.n_warm as usize {
                prop_assert!((lrs[n] - lrs[n - 1] - step).abs() <= 1e-12 * eta_max);
            }
            if kind == ScheduleKind::Cosine {
                prop_assert!(lrs[p.n_warm as usize..].windows(2).all(|w| w[1] <= w[0] + 1e-18));
            }
        }
    }

    #[test]
    fn meta_schedules_stay_in_range(
        lengths in prop::collection::vec(2u64..400, 1..8),
        variant in prop::sample::select(MetaVariant::ALL.to_vec()),
    ) {
        let cfg = ScheduleConfig { eta_max: 1e-3, ..Default::default() };
        let lrs = schedules::task_lrs(ScheduleKind::Cosine, variant, &cfg, &lengths).unwrap();
        prop_assert_eq!(lrs.len() as u64, *lengths.last().unwrap());
        prop_assert!(lrs.iter().all(|&x| (0.0..=1e-3 * (1.0 + 1e-12)).contains(&x)));
    }

    #[test]
    fn plans_partition_the_inventory(
        n in 1usize..40,
        t_frac in 0.0..1.0f64,
        kind in prop::sample::select(OrderingKind::ALL.to_vec()),
        seed in any::<u64>(),
    ) {
        let inv = inventory(n, seed);
        let t = 1 + ((n - 1) as f64 * t_frac) as usize;
        let plan = streams::plan(&inv, kind, false, t, seed).unwrap();
        plan.validate().unwrap();
        let ids: BTreeSet<ConceptId> = inv.ids().into_iter().collect();
        let flat: BTreeSet<ConceptId> = plan.tasks.iter().flatten().copied().collect();
        prop_assert_eq!(flat, ids);
        prop_assert_eq!(plan.tasks.len(), t);
        let sizes: Vec<usize> = plan.tasks.iter().map(Vec::len).collect();
        prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1] && w[0] - w[1] <= 1));

        let again = streams::plan(&inv, kind, false, t, seed).unwrap();
        prop_assert_eq!(&again, &plan);
        let rev = streams::plan(&inv, kind, true, t, seed).unwrap();
        let mut back = rev.ordering.clone();
        back.reverse();
        prop_assert_eq!(back, plan.ordering);
    }

    #[test]
    fn batch_counts_follow_the_ratios(r in ratios(), b in 1usize..2000, buffer_len in 0usize..3000) {
        let target = target_counts(&r, b);
        prop_assert_eq!(target.total(), b);
        for (got, l) in [(target.pretrain, r.lambda_p), (target.update, r.lambda_d), (target.buffer, r.lambda_b)] {
            prop_assert!((got as f64 - l * b as f64).abs() < 1.0);
        }
        let c = allocate(&r, b, buffer_len);
        prop_assert_eq!(c.total(), b);
        prop_assert_eq!(c.pretrain, target.pretrain);
        prop_assert_eq!(c.buffer, target.buffer.min(buffer_len));
    }

    #[test]
    fn buffer_is_the_union_of_streamed_pools(sizes in prop::collection::vec(0usize..30, 1..6)) {
        let mut pools = Pools::new(Vec::new());
        let mut expected: BTreeMap<ConceptId, usize> = BTreeMap::new();
        for (t, &n) in sizes.iter().enumerate() {
            let pool: Vec<Sample> = (0..n)
                .map(|i| Sample {
                    image: vec![i as f64],
                    text: vec![0.0],
                    concept: ConceptId(t as u32),
                    pool: PoolTag::Update,
                })
                .collect();
            *expected.entry(ConceptId(t as u32)).or_default() += n;
            pools.reveal(pool);
            pools.update_buffer();
        }
        expected.retain(|_, n| *n > 0);
        prop_assert_eq!(pools.snapshot().buffer_concepts, expected);
    }

    #[test]
    fn merging_is_affine(
        w in 0.0..=1.0f64,
        a in -2.0..2.0f64,
        vals in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64), 1..8),
    ) {
        let theta0 = params_with(&vals.iter().map(|v| v.0).collect::<Vec<_>>());
        let t1 = params_with(&vals.iter().map(|v| v.1).collect::<Vec<_>>());
        let t2 = params_with(&vals.iter().map(|v| v.2).collect::<Vec<_>>());
        let mut mix = t1.clone();
        mix.scale(a);
        mix.axpy(1.0 - a, &t2).unwrap();
        for kind in [MethodKind::MergeEma, MethodKind::MergeFt, MethodKind::MergeZs] {
            let lhs = methods::merge_end_of_task(kind, &theta0, &theta0, &mix, w).unwrap();
            let m1 = methods::merge_end_of_task(kind, &theta0, &theta0, &t1, w).unwrap();
            let m2 = methods::merge_end_of_task(kind, &theta0, &theta0, &t2, w).unwrap();
            let (l, x, y) = (&lhs.require("a").unwrap().data, &m1.require("a").unwrap().data, &m2.require("a").unwrap().data);
            for i in 0..l.len() {
                prop_assert!((l[i] - (a * x[i] + (1.0 - a) * y[i])).abs() < 1e-9);
            }
        }
        let keep = methods::merge_end_of_task(MethodKind::MergeEma, &theta0, &t1, &t2, 1.0).unwrap();
        prop_assert_eq!(keep, t1.clone());
        let take = methods::merge_end_of_task(MethodKind::MergeEma, &theta0, &t1, &t2, 0.0).unwrap();
        prop_assert_eq!(take, t2);
    }

    #[test]
    fn clipping_caps_the_norm(vals in prop::collection::vec(-100.0..100.0f64, 1..20), max in 0.01..10.0f64) {
        let mut g = params_with(&vals);
        let before = g.norm();
        let reported = clip_grad_norm(&mut g, max);
        prop_assert!((reported - before).abs() < 1e-12);
        prop_assert!(g.norm() <= max * (1.0 + 1e-12));
        if before <= max {
            prop_assert_eq!(g, params_with(&vals));
        }
    }

    #[test]
    fn contrastive_loss_is_non_negative(
        n in 1usize..10,
        d in 1usize..6,
        tau in 0.01..1.0f64,
        seed in any::<u64>(),
    ) {
        let val = |i: usize| (((i as u64).wrapping_mul(0x2545_f491_4f6c_dd1d) ^ seed) % 1000) as f64 / 500.0 - 1.0;
        let norm = |m: Array2<f64>| {
            let mut m = m;
            for mut row in m.rows_mut() {
                let s = row.dot(&row).sqrt().max(1e-9);
                row /= s;
            }
            m
        };
        let img = norm(Array2::from_shape_fn((n, d), |(i, j)| val(i * d + j)));
        let txt = norm(Array2::from_shape_fn((n, d), |(i, j)| val(1000 + i * d + j)));
        let (loss, per) = model::clip_loss(&img, &txt, tau).unwrap();
        prop_assert!(loss >= 0.0);
        prop_assert!(per.iter().all(|&x| x >= -1e-12));
        if n == 1 {
            prop_assert!(loss.abs() < 1e-12);
        }
    }

    #[test]
    fn ewc_penalty_is_non_negative_and_zero_at_anchor(
        vals in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64, 0.0..3.0f64), 1..10),
        lambda in 0.0..1e6f64,
    ) {
        let p = params_with(&vals.iter().map(|v| v.0).collect::<Vec<_>>());
        let anchor = params_with(&vals.iter().map(|v| v.1).collect::<Vec<_>>());
        let fisher = params_with(&vals.iter().map(|v| v.2).collect::<Vec<_>>());
        prop_assert!(methods::ewc_penalty(&p, &anchor, &fisher, lambda).unwrap() >= 0.0);
        prop_assert_eq!(methods::ewc_penalty(&anchor, &anchor, &fisher, lambda).unwrap(), 0.0);
    }
}

#[test]
fn random_orderings_are_uniform() {
    let ids: Vec<ConceptId> = (0..4).map(ConceptId).collect();
    let mut counts: BTreeMap<Vec<ConceptId>, usize> = BTreeMap::new();
    let draws = 24_000;
    for seed in 0..draws {
        *counts.entry(streams::order_random(&ids, seed).unwrap()).or_default() += 1;
    }
    assert_eq!(counts.len(), 24);
    let expected = draws as f64 / 24.0;
    let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 23 degrees of freedom, p = 0.001.
    assert!(chi2 < 49.73, "chi-square {chi2}");
}

#[test]
fn buffer_quota_reaches_every_streamed_concept() {
    let mut pools = Pools::new(Vec::new());
    for t in 0..5u32 {
        pools.reveal(
            (0..4)
                .map(|i| Sample {
                    image: vec![i as f64],
                    text: vec![0.0],
                    concept: ConceptId(t),
                    pool: PoolTag::Update,
                })
                .collect(),
        );
        pools.update_buffer();
    }
    let r = MixtureRatios::new(0.0, 0.5, 0.5).unwrap();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
    let mut seen = BTreeSet::new();
    for _ in 0..200 {
        for s in pools.sample_batch(&r, 16, &mut rng).unwrap() {
            if s.pool == PoolTag::Buffer {
                seen.insert(s.concept);
            }
        }
    }
    assert_eq!(seen.len(), 5);
}

#[test]
fn short_tasks_use_a_constant_rate() {
    let cfg = ScheduleConfig::default();
    for variant in MetaVariant::ALL {
        assert_eq!(schedules::task_lrs(ScheduleKind::Rsqrt, variant, &cfg, &[1]).unwrap(), vec![cfg.eta_max]);
        let lrs = schedules::task_lrs(ScheduleKind::Rsqrt, variant, &cfg, &[1, 1, 100]).unwrap();
        assert_eq!(lrs.len(), 100);
    }
    let p = ScheduleParams::new(0.0, 1e-5, 100, 1000, 100).unwrap();
    assert_eq!(schedules::rsqrt_lr(1000, &p).unwrap(), 0.0);
}

#[test]
fn fixed_batch_loss_goes_down() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let cfg = model::ModelConfig { d_in: 8, d_emb: 4 };
    let mut params = model::init_params(&cfg, 0.07, &mut rng);
    let images = Array2::from_shape_fn((16, 8), |_| rng.random_range(-1.0..1.0));
    let texts = Array2::from_shape_fn((16, 8), |_| rng.random_range(-1.0..1.0));
    let batch = model::Batch::new(images, texts).unwrap();
    let ctx = model::GradContext::default();
    let start = model::loss(&params, &batch, &ctx).unwrap();
    let mut opt = model::AdamW::new(model::AdamWConfig::default(), &params);
    for _ in 0..200 {
        let mut g = model::grad(&params, &batch, &ctx).unwrap().grads;
        opt.step(&mut params, &mut g, 1e-3, None).unwrap();
    }
    let end = model::loss(&params, &batch, &ctx).unwrap();
    assert!(end < 0.5 * start, "{start} -> {end}");
}
