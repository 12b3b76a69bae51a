use std::sync::Arc;

use lss_core::shoot::*;
use lss_core::splat::BevGridSpec;
use lss_tensor::gradcheck::{check_gradients, GradCheckConfig};
use lss_tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn straight(speed: f64, lateral: f64, t: usize) -> Trajectory {
    Trajectory::new((1..=t).map(|j| [speed * j as f64 * 0.5, lateral * j as f64, j as f64 * 0.5]).collect()).unwrap()
}

fn random_templates(seed: u64, k: usize, t: usize) -> TemplateSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TemplateSet::new(
        (0..k)
            .map(|_| straight(rng.random_range(1.0..10.0), rng.random_range(-1.0..1.0), t))
            .collect(),
    )
    .unwrap()
}

fn probs(scores: &[f64]) -> Vec<f64> {
    let mut g = Graph::<f64>::new();
    let s = g.constant(Tensor::from_vec([1, scores.len()], scores.to_vec()).unwrap());
    let p = plan_distribution(&mut g, s).unwrap();
    g.value(p).data().to_vec()
}

#[test]
fn boltzmann_example() {
    // Costs 3 and 1 → scores −3 and −1.
    let p = probs(&[-3.0, -1.0]);
    assert!((p[0] - 0.1192).abs() < 1e-4 && (p[1] - 0.8808).abs() < 1e-4, "{p:?}");
}

#[test]
fn equal_costs_give_uniform_plans() {
    let p = probs(&[-2.5; 7]);
    assert!(p.iter().all(|&v| (v - 1.0 / 7.0).abs() < 1e-12));
}

/// Scoring against an explicit per-point cost lookup.
#[test]
fn scores_match_a_direct_cost_lookup() {
    let spec = BevGridSpec::square(10.0, 0.5).unwrap();
    let ts = random_templates(4, 16, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cost = Tensor::<f64>::uniform([2, 1, spec.nx(), spec.ny()], -1.0, 2.0, &mut rng);
    let taps = Arc::new(template_taps(&ts, &spec, CostSampling::Nearest));
    let mut g = Graph::<f64>::new();
    let c = g.constant(cost.clone());
    let s = score_templates(&mut g, c, &taps, &spec).unwrap();
    let got = g.value(s).data().to_vec();
    for b in 0..2 {
        for (k, tr) in ts.templates.iter().enumerate() {
            let mut total = 0.0;
            for p in &tr.points {
                let ix = ((p[0] + 10.0) / 0.5).floor();
                let iy = ((p[1] + 10.0) / 0.5).floor();
                if (0.0..40.0).contains(&ix) && (0.0..40.0).contains(&iy) {
                    total += cost.data()[b * 1600 + ix as usize * 40 + iy as usize];
                }
            }
            assert!((got[b * 16 + k] + total).abs() < 1e-12);
        }
    }
}

#[test]
fn bilinear_taps_interpolate_between_centres() {
    let spec = BevGridSpec::square(2.0, 1.0).unwrap();
    let ts = TemplateSet::new(vec![Trajectory::new(vec![[0.0, 0.0, 1.0]]).unwrap()]).unwrap();
    let taps = template_taps(&ts, &spec, CostSampling::Bilinear);
    // (0, 0) sits on the corner shared by four cell centres.
    assert_eq!(taps[0].len(), 4);
    assert!(taps[0].iter().all(|&(_, w)| (w - 0.25).abs() < 1e-12));
    let near = template_taps(&ts, &spec, CostSampling::Nearest);
    assert_eq!(near[0], vec![(2 * 4 + 2, 1.0)]);
}

#[test]
fn off_grid_points_cost_nothing() {
    let spec = BevGridSpec::square(2.0, 1.0).unwrap();
    let ts = TemplateSet::new(vec![Trajectory::new(vec![[0.5, 0.5, 1.0], [30.0, 0.0, 2.0]]).unwrap()]).unwrap();
    let taps = template_taps(&ts, &spec, CostSampling::Nearest);
    assert_eq!(taps[0].len(), 1);
}

#[test]
fn score_gradient_touches_only_visited_cells() {
    let spec = BevGridSpec::square(4.0, 1.0).unwrap();
    let ts = TemplateSet::new(vec![straight(1.0, 0.0, 3), straight(2.0, 1.0, 3)]).unwrap();
    let taps = Arc::new(template_taps(&ts, &spec, CostSampling::Nearest));
    let mut g = Graph::<f64>::new();
    let cost = g.variable(Tensor::zeros([1, 1, 8, 8]));
    let s = score_templates(&mut g, cost, &taps, &spec).unwrap();
    let loss = planning_loss(&mut g, s, &[0]).unwrap();
    g.backward(loss).unwrap();
    let grad = g.grad(cost).unwrap().data().to_vec();
    let visited: std::collections::HashSet<u32> = taps.iter().flatten().map(|&(c, _)| c).collect();
    for (i, &v) in grad.iter().enumerate() {
        if !visited.contains(&(i as u32)) {
            assert_eq!(v, 0.0, "cell {i}");
        }
    }
    assert!(grad.iter().any(|&v| v != 0.0));
}

#[test]
fn template_scoring_gradcheck() {
    let spec = BevGridSpec::square(4.0, 0.5).unwrap();
    let ts = random_templates(8, 12, 5);
    for sampling in [CostSampling::Nearest, CostSampling::Bilinear] {
        let taps = Arc::new(template_taps(&ts, &spec, sampling));
        let cost = Tensor::<f64>::uniform([2, 1, 16, 16], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let report = check_gradients(
            &[cost],
            |g, xs| {
                let s = score_templates(g, xs[0], &taps, &spec).unwrap();
                g.cross_entropy(s, &[3, 7])
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report:?}");
    }
}

/// Label oracle: brute-force L2 distance over every template.
#[test]
fn label_is_the_nearest_template() {
    let ts = random_templates(10, 32, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let e = straight(rng.random_range(0.0..12.0), rng.random_range(-1.5..1.5), 8);
        let dist = |t: &Trajectory| -> f64 {
            t.points.iter().zip(&e.points).map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sum()
        };
        let best = (0..32).min_by(|&a, &b| dist(&ts.templates[a]).total_cmp(&dist(&ts.templates[b]))).unwrap();
        assert_eq!(plan_label(&e, &ts).unwrap(), best);
    }
    assert!(plan_label(&straight(1.0, 0.0, 3), &ts).is_err());
}

#[test]
fn kmeans_finds_separated_clusters_and_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let centres = [(2.0, -0.5), (6.0, 0.0), (10.0, 0.5)];
    let data: Vec<Trajectory> = (0..300)
        .map(|i| {
            let (v, l) = centres[i % 3];
            straight(v + rng.random_range(-0.1..0.1), l + rng.random_range(-0.02..0.02), 6)
        })
        .collect();
    let ts = fit_templates(&data, 3, 7).unwrap();
    assert_eq!(ts, fit_templates(&data, 3, 7).unwrap());
    let mut speeds: Vec<f64> = ts.templates.iter().map(|t| t.points[0][0] / 0.5).collect();
    speeds.sort_by(f64::total_cmp);
    for (s, (v, _)) in speeds.iter().zip(centres) {
        assert!((s - v).abs() < 0.1, "{speeds:?}");
    }
    assert!(fit_templates(&data[..2], 3, 0).is_err());
}

#[test]
fn template_text_round_trip() {
    let ts = random_templates(12, 5, 4);
    assert_eq!(TemplateSet::from_text(&ts.to_text()).unwrap(), ts);
    let truncated: String = ts.to_text().lines().take(9).collect::<Vec<_>>().join("\n");
    assert!(TemplateSet::from_text(&truncated).is_err());
    assert!(Trajectory::new(vec![[0.0, 0.0, 1.0], [1.0, 0.0, 1.0]]).is_err());
}

/// Under uniform scores, top-k hits the label with probability k/K.
#[test]
fn uniform_plans_hit_at_chance() {
    let k = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for top in [5, 10, 20] {
        let n = 20_000;
        let mut hits = 0;
        for _ in 0..n {
            // Random but distinct scores: a random ranking.
            let p: Vec<f32> = (0..k).map(|_| rng.random::<f32>()).collect();
            hits += top_k_hit(&p, rng.random_range(0..k), top) as usize;
        }
        let rate = hits as f64 / n as f64;
        let chance = top as f64 / k as f64;
        assert!((rate - chance).abs() < 0.02, "top-{top}: {rate} vs {chance}");
    }
    assert!(top_k_hit(&[0.5, 0.5, 0.5], 0, 1));
    assert!(!top_k_hit(&[0.5, 0.5, 0.5], 1, 1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn plans_are_normalized_and_shift_invariant(
        scores in prop::collection::vec(-30.0..30.0f64, 2..80),
        shift in -50.0..50.0f64,
    ) {
        let p = probs(&scores);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        prop_assert!(p.iter().all(|&v| v > 0.0));
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        let q = probs(&shifted);
        prop_assert!(p.iter().zip(&q).all(|(a, b)| (a - b).abs() <= 1e-6));
    }

    /// Scaling all costs by c > 0 keeps the ranking.
    #[test]
    fn positive_scaling_keeps_the_ranking(
        scores in prop::collection::vec(-10.0..10.0f64, 2..40),
        c in 0.1..10.0f64,
    ) {
        let rank = |s: &[f64]| {
            let mut i: Vec<usize> = (0..s.len()).collect();
            i.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
            i
        };
        let p = probs(&scores);
        let scaled: Vec<f64> = scores.iter().map(|s| s * c).collect();
        let q = probs(&scaled);
        prop_assert_eq!(rank(&p), rank(&q));
    }
}
