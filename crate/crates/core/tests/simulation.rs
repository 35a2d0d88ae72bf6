use sceneal::diag::{
    category_kl_to_uniform, class_histogram, mean_and_std, sample_pair_similarities, selection_report, DiagConfig,
};
use sceneal::rounds::{run_al_rounds, Strategy};
use sceneal::synth::{
    generate_pool, scene_rng, simulate_predictions, GroundTruthOracle, NoiseModel, PoolSpec, SimulatedPredictor,
};
use sceneal::{RoundState, Scene, ScoringContext, StagePlan};

fn spec(n: usize, seed: u64) -> PoolSpec {
    PoolSpec {
        n_scenes: n,
        rng_seed: seed,
        ..PoolSpec::default()
    }
}

fn mean_similarity(scenes: &[Scene], ctx: &ScoringContext, seed: u64) -> f64 {
    let s = sample_pair_similarities(scenes, 1000, seed, &ctx.catalog, ctx.tau(), &ctx.kernel).unwrap();
    mean_and_std(&s).unwrap().0
}

#[test]
fn class_mix_is_reproduced() {
    let ctx = ScoringContext::default();
    let pool = generate_pool(&spec(1000, 21), &ctx.catalog, &ctx.anchors).unwrap();
    let counts = class_histogram(&pool, &ctx.catalog, ctx.tau());
    let total: u64 = counts.iter().sum();
    let car = counts[0] as f64 / total as f64;
    assert!((car - 0.9).abs() <= 0.02, "car share {car}");
}

#[test]
fn false_positive_count_follows_the_rate() {
    let ctx = ScoringContext::default();
    let pool = generate_pool(
        &PoolSpec {
            objects_max: 4,
            ..spec(10_000, 22)
        },
        &ctx.catalog,
        &ctx.anchors,
    )
    .unwrap();
    let noise = NoiseModel {
        false_positive_rate: 2.0,
        ..NoiseModel::default()
    };
    let extra: usize = pool
        .iter()
        .enumerate()
        .map(|(i, gt)| {
            let pred =
                simulate_predictions(gt, &noise, &ctx.catalog, &ctx.anchors, &mut scene_rng(5, i as u64)).unwrap();
            pred.detections.len() - gt.detections.len()
        })
        .sum();
    let mean = extra as f64 / pool.len() as f64;
    assert!((mean - 2.0).abs() <= 0.05, "mean false positives {mean}");
}

#[test]
fn duplicated_layouts_raise_similarity() {
    let ctx = ScoringContext::default();
    let unique = generate_pool(&spec(200, 23), &ctx.catalog, &ctx.anchors).unwrap();
    let single = generate_pool(
        &PoolSpec {
            redundancy_groups: Some(1),
            ..spec(200, 23)
        },
        &ctx.catalog,
        &ctx.anchors,
    )
    .unwrap();
    let (u, s) = (mean_similarity(&unique, &ctx, 1), mean_similarity(&single, &ctx, 1));
    assert!(s > u, "one layout {s} vs unique layouts {u}");
    assert!(s > 0.99);
}

#[test]
fn entropy_only_balances_classes_better_than_random() {
    let ctx = ScoringContext::default();
    let mut wins = 0;
    for seed in 0..5u64 {
        let gt = generate_pool(&spec(300, 100 + seed), &ctx.catalog, &ctx.anchors).unwrap();
        let pred = SimulatedPredictor::new(
            &gt,
            NoiseModel::default(),
            ctx.catalog.clone(),
            ctx.anchors.clone(),
            seed,
        )
        .unwrap();
        let oracle = GroundTruthOracle::new(&gt);
        let ids: Vec<String> = gt.iter().map(|s| s.id.clone()).collect();
        let kl = |strategy| {
            let mut state = RoundState::new(&ids, &[], 40, seed).unwrap();
            let run = run_al_rounds(
                &StagePlan {
                    n_r: 20,
                    ..StagePlan::default()
                },
                2,
                strategy,
                &pred,
                &oracle,
                &mut state,
                &ctx,
            )
            .unwrap();
            category_kl_to_uniform(
                &class_histogram(&run.revealed, &ctx.catalog, ctx.tau()),
                ctx.catalog.len(),
            )
            .unwrap()
        };
        if kl(Strategy::EntropyOnly) < kl(Strategy::Random) {
            wins += 1;
        }
    }
    assert!(wins >= 4, "entropy-only won {wins} of 5");
}

#[test]
fn report_of_half_the_pool_has_about_half_the_boxes() {
    let ctx = ScoringContext::default();
    let pool = generate_pool(&spec(400, 24), &ctx.catalog, &ctx.anchors).unwrap();
    let full = selection_report(&pool, &pool, &ctx, &DiagConfig::default(), 3).unwrap();
    let half = selection_report(&pool[..200], &pool, &ctx, &DiagConfig::default(), 3).unwrap();
    let ratio = half.box_count as f64 / full.box_count as f64;
    assert!((ratio - 0.5).abs() < 0.05, "ratio {ratio}");
    assert_eq!(full.pool_class_histogram, half.pool_class_histogram);
    assert_eq!(
        half,
        selection_report(&pool[..200], &pool, &ctx, &DiagConfig::default(), 3).unwrap()
    );
}
