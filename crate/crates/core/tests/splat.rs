use std::collections::HashMap;
use std::sync::Arc;

use lss_core::splat::*;
use lss_tensor::gradcheck::{check_gradients, GradCheckConfig};
use lss_tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Cloud {
    spec: BevGridSpec,
    batch: usize,
    coords: Vec<[f64; 3]>,
    owner: Vec<u32>,
    features: Tensor<f32>,
}

fn cloud(seed: u64, max_points: usize, max_c: usize) -> Cloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = [0.25, 0.5, 0.75, 1.0][rng.random_range(0..4)];
    let half = cell * 2.0 * rng.random_range(2..=16) as f64;
    let spec = BevGridSpec::square(half, cell).unwrap();
    let batch = rng.random_range(1..=3);
    let p = rng.random_range(1..=max_points);
    let c = rng.random_range(1..=max_c);
    let reach = half * 1.2;
    let coords = (0..p)
        .map(|_| [rng.random_range(-reach..reach), rng.random_range(-reach..reach), rng.random_range(-2.0..4.0)])
        .collect();
    let owner = (0..p).map(|_| rng.random_range(0..batch as u32)).collect();
    let features = Tensor::uniform([p, c], -2.0, 2.0, &mut rng);
    Cloud {
        spec,
        batch,
        coords,
        owner,
        features,
    }
}

/// Scatter-add written against a hash map of cells: no sorting, no
/// shared code with the library.
fn hashmap_oracle(c: &Cloud) -> Vec<f64> {
    let (nx, ny) = (c.spec.nx(), c.spec.ny());
    let ch = c.features.shape()[1];
    let mut acc: HashMap<(usize, usize, usize), Vec<f64>> = HashMap::new();
    for (i, p) in c.coords.iter().enumerate() {
        let fx = ((p[0] - c.spec.x_min) / c.spec.cell).floor();
        let fy = ((p[1] - c.spec.y_min) / c.spec.cell).floor();
        if fx < 0.0 || fy < 0.0 || fx >= nx as f64 || fy >= ny as f64 {
            continue;
        }
        let e = acc.entry((c.owner[i] as usize, fx as usize, fy as usize)).or_insert_with(|| vec![0.0; ch]);
        for (k, v) in e.iter_mut().enumerate() {
            *v += c.features.data()[i * ch + k] as f64;
        }
    }
    let mut out = vec![0.0; c.batch * ch * nx * ny];
    for ((b, ix, iy), v) in acc {
        for (k, s) in v.into_iter().enumerate() {
            out[((b * ch + k) * nx + ix) * ny + iy] = s;
        }
    }
    out
}

fn max_diff(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (&x, &y)| m.max((x as f64 - y).abs()))
}

#[test]
fn pooling_matches_scatter_add_on_random_clouds() {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let max_points = if seed % 10 == 0 { 100_000 } else { 5_000 };
        let c = cloud(seed, max_points, 32);
        let assign = Arc::new(assign_bins(&c.coords, &c.owner, &c.spec, c.batch).unwrap());
        let mut g = Graph::<f32>::new();
        let x = g.constant(c.features.clone());
        let out = frustum_pool(&mut g, x, &assign, &c.spec, c.batch).unwrap();
        let oracle = hashmap_oracle(&c);
        let reference = frustum_pool_reference(&c.features, &assign.bins, &c.spec, c.batch).unwrap();
        worst = worst.max(max_diff(g.value(out).data(), &oracle));
        worst = worst.max(max_diff(reference.data(), &oracle));
    }
    assert!(worst <= 1e-5, "max abs diff {worst}");
}

#[test]
fn pooling_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let mut c = cloud(1000 + seed, 64, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Crowd a few cells so shared bins are exercised.
        for p in c.coords.iter_mut().take(10) {
            *p = [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 0.0];
        }
        let assign = Arc::new(assign_bins(&c.coords, &c.owner, &c.spec, c.batch).unwrap());
        let f64_features = c.features.cast::<f64>();
        let (spec, batch) = (c.spec, c.batch);
        let w = Tensor::<f64>::uniform([batch, c.features.shape()[1], spec.nx(), spec.ny()], -1.0, 1.0, &mut rng);
        let report = check_gradients(
            &[f64_features],
            |g, xs| {
                let out = frustum_pool(g, xs[0], &assign, &spec, batch).unwrap();
                let wv = g.constant(w.clone());
                let prod = g.mul(out, wv)?;
                g.sum_all(prod)
            },
            &GradCheckConfig {
                seed,
                ..GradCheckConfig::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "seed {seed}: {report:?}");
    }
}

#[test]
fn composed_pooling_agrees_with_the_kernel() {
    for seed in 0..10 {
        let c = cloud(2000 + seed, 3000, 16);
        let assign = Arc::new(assign_bins(&c.coords, &c.owner, &c.spec, c.batch).unwrap());
        let mut g = Graph::<f64>::new();
        let x = g.variable(c.features.cast());
        let y = g.variable(c.features.cast());
        let a = frustum_pool(&mut g, x, &assign, &c.spec, c.batch).unwrap();
        let b = frustum_pool_composed(&mut g, y, &assign, &c.spec, c.batch).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-9);
        let s = g.sum_all(a).unwrap();
        let t = g.sum_all(b).unwrap();
        let both = g.add(s, t).unwrap();
        g.backward(both).unwrap();
        assert!(g.grad(x).unwrap().max_abs_diff(g.grad(y).unwrap()) < 1e-9);
    }
}

#[test]
fn mass_is_conserved_for_in_grid_points() {
    let c = cloud(7, 20_000, 8);
    let assign = Arc::new(assign_bins(&c.coords, &c.owner, &c.spec, c.batch).unwrap());
    let mut g = Graph::<f32>::new();
    let x = g.constant(c.features.clone());
    let out = frustum_pool(&mut g, x, &assign, &c.spec, c.batch).unwrap();
    let ch = c.features.shape()[1];
    let mut kept = vec![0.0f64; ch];
    for (i, &b) in assign.bins.iter().enumerate() {
        if b != SENTINEL {
            for (k, s) in kept.iter_mut().enumerate() {
                *s += c.features.data()[i * ch + k] as f64;
            }
        }
    }
    let per = c.spec.cells();
    for (k, want) in kept.iter().enumerate() {
        let mut got = 0.0f64;
        for b in 0..c.batch {
            got += g.value(out).data()[(b * ch + k) * per..(b * ch + k + 1) * per].iter().map(|&v| v as f64).sum::<f64>();
        }
        assert!((got - want).abs() < 1e-3, "channel {k}: {got} vs {want}");
    }
}

#[test]
fn out_of_grid_points_get_zero_gradient() {
    let spec = BevGridSpec::square(2.0, 1.0).unwrap();
    let coords = vec![[0.5, 0.5, 0.0], [5.0, 0.0, 0.0], [-0.5, 1.5, 0.0]];
    let assign = Arc::new(assign_bins(&coords, &[0, 0, 0], &spec, 1).unwrap());
    assert_eq!(assign.bins[1], SENTINEL);
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::ones([3, 2]));
    let out = frustum_pool(&mut g, x, &assign, &spec, 1).unwrap();
    let s = g.sum_all(out).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
}

#[test]
fn rejects_bad_input() {
    let spec = BevGridSpec::square(2.0, 1.0).unwrap();
    assert!(matches!(
        assign_bins(&[[f64::NAN, 0.0, 0.0]], &[0], &spec, 1),
        Err(lss_core::CoreError::NonFiniteCoord(0))
    ));
    assert!(assign_bins(&[[0.0; 3]], &[2], &spec, 1).is_err());
    let t = Tensor::<f32>::ones([1, 1]);
    assert!(frustum_pool_reference(&t, &[99], &spec, 1).is_err());
    assert!(BevGridSpec::new(0.0, 1.0, 0.0, 1.0, 0.3).is_err());
}

#[test]
fn pooling_is_deterministic() {
    let c = cloud(99, 50_000, 16);
    let run = || {
        let assign = Arc::new(assign_bins(&c.coords, &c.owner, &c.spec, c.batch).unwrap());
        let mut g = Graph::<f32>::new();
        let x = g.constant(c.features.clone());
        let out = frustum_pool(&mut g, x, &assign, &c.spec, c.batch).unwrap();
        g.value(out).clone()
    };
    assert_eq!(run().data(), run().data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn pooling_is_permutation_invariant(seed in any::<u64>()) {
        let c = cloud(seed, 2000, 8);
        let ch = c.features.shape()[1];
        let mut perm: Vec<usize> = (0..c.coords.len()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let coords: Vec<_> = perm.iter().map(|&i| c.coords[i]).collect();
        let owner: Vec<_> = perm.iter().map(|&i| c.owner[i]).collect();
        let feats: Vec<f32> = perm.iter().flat_map(|&i| c.features.data()[i * ch..(i + 1) * ch].to_vec()).collect();
        let pool = |coords: &[[f64; 3]], owner: &[u32], f: Tensor<f32>| {
            let assign = Arc::new(assign_bins(coords, owner, &c.spec, c.batch).unwrap());
            let mut g = Graph::<f32>::new();
            let x = g.constant(f);
            let out = frustum_pool(&mut g, x, &assign, &c.spec, c.batch).unwrap();
            g.value(out).clone()
        };
        let a = pool(&c.coords, &c.owner, c.features.clone());
        let b = pool(&coords, &owner, Tensor::from_vec([coords.len(), ch], feats).unwrap());
        prop_assert!(a.max_abs_diff(&b) <= 1e-5);
    }

    #[test]
    fn assignment_is_a_stable_sort(seed in any::<u64>()) {
        let c = cloud(seed, 500, 1);
        let a = assign_bins(&c.coords, &c.owner, &c.spec, c.batch).unwrap();
        let sorted: Vec<u32> = a.order.iter().map(|&i| a.bins[i as usize]).collect();
        prop_assert!(sorted.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(a.order.windows(2).all(|w| a.bins[w[0] as usize] < a.bins[w[1] as usize] || w[0] < w[1]));
        prop_assert_eq!(a.valid(), a.bins.iter().filter(|&&b| b != SENTINEL).count());
    }
}
