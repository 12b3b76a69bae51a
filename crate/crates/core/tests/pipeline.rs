use lss_core::bev_head::{BevHeadConfig, Task};
use lss_core::camera::{rot_z_quarter, Camera, CameraRig, DepthBinSpec, Extrinsics};
use lss_core::lift::*;
use lss_core::pipeline::*;
use lss_core::splat::BevGridSpec;
use lss_tensor::gradcheck::{compare_with_finite_differences, GradCheckConfig};
use lss_tensor::{Ctx, Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn micro(symmetrize: bool, mode: LiftMode) -> ModelConfig {
    ModelConfig {
        arch: Arch::Lss,
        lift_mode: mode,
        task: Task::Vehicle,
        image_height: 16,
        image_width: 16,
        cameras: 2,
        bins: DepthBinSpec::new(2.0, 2.0, 4).unwrap(),
        encoder: EncoderConfig {
            widths: vec![4, 4],
            depth_bins: 4,
            context: 3,
        },
        grid: BevGridSpec::square(8.0, 1.0).unwrap(),
        head: BevHeadConfig {
            in_channels: 3,
            stem: 4,
            widths: [4, 4, 6],
            blocks_per_stage: 1,
            up: 4,
            out_channels: 1,
            symmetrize,
        },
    }
}

fn micro_rig() -> CameraRig {
    CameraRig::ring(&[0.0, 150.0], 16, 16, 100.0, 1.6, 10.0).unwrap()
}

struct Inputs {
    cams: Vec<Camera>,
    images: Vec<Vec<f32>>,
    depths: Vec<Vec<f32>>,
}

fn inputs(rig: &CameraRig, seed: u64) -> Inputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = rig.image_size();
    Inputs {
        cams: rig.cameras().to_vec(),
        images: (0..rig.len()).map(|_| Tensor::<f32>::uniform([3, h, w], 0.0, 1.0, &mut rng).into_data()).collect(),
        depths: (0..rig.len()).map(|_| Tensor::<f32>::uniform([h, w], 1.0, 12.0, &mut rng).into_data()).collect(),
    }
}

fn batch<'a>(inp: &'a Inputs, order: &[usize], cams: &[Camera]) -> Batch<'a> {
    Batch {
        size: 1,
        views: order
            .iter()
            .map(|&k| View {
                sample: 0,
                slot: k,
                camera: cams[k],
                image: &inp.images[k],
                depth: &inp.depths[k],
            })
            .collect(),
    }
}

/// Random weights everywhere, including the output layer (which is zero at init).
fn random_store<T: lss_tensor::Float>(cfg: &ModelConfig, seed: u64) -> ParamStore<T> {
    let mut store = init_model::<T>(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let shape = store.value("head.out.w").unwrap().shape().to_vec();
    *store.value_mut("head.out.w").unwrap() = Tensor::randn(shape, 0.5, &mut rng);
    store
}

fn run(cfg: &ModelConfig, store: &ParamStore<f32>, b: &Batch<'_>) -> Tensor<f32> {
    let mut ctx = Ctx::new(store, false);
    let out = forward(&mut ctx, cfg, b).unwrap();
    ctx.graph.value(out).clone()
}

#[test]
fn micro_pipeline_gradcheck() {
    let cfg = micro(false, LiftMode::Learned);
    let rig = micro_rig();
    let inp = inputs(&rig, 3);
    let b = batch(&inp, &[0, 1], &inp.cams);
    let store = random_store::<f64>(&cfg, 5);
    let w = Tensor::<f64>::randn([1, 1, 16, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(9));
    let checked = ["enc.block0.w", "enc.depth.w", "enc.depth.b", "enc.context.w", "head.stem.w", "head.layer3.0.conv1.w", "head.out.w"];

    let loss = |store: &ParamStore<f64>| -> (f64, Vec<Tensor<f64>>) {
        let mut ctx = Ctx::new(store, true);
        let out = forward(&mut ctx, &cfg, &b).unwrap();
        let wv = ctx.graph.constant(w.clone());
        let prod = ctx.graph.mul(out, wv).unwrap();
        let l = ctx.graph.sum_all(prod).unwrap();
        let value = ctx.graph.value(l).item();
        ctx.backward(l).unwrap();
        let grads = ctx.grads();
        let pick = checked
            .iter()
            .map(|n| grads.iter().find(|(g, _)| g == n).unwrap().1.clone())
            .collect();
        (value, pick)
    };
    let (_, analytic) = loss(&store);
    let start: Vec<Tensor<f64>> = checked.iter().map(|n| store.value(n).unwrap().clone()).collect();
    let report = compare_with_finite_differences(
        &start,
        &analytic,
        |xs| {
            let mut s = store.clone();
            for (n, x) in checked.iter().zip(xs) {
                *s.value_mut(n).unwrap() = x.clone();
            }
            Ok(loss(&s).0)
        },
        &GradCheckConfig {
            max_coords: 24,
            ..GradCheckConfig::default()
        },
    )
    .unwrap();
    assert!(report.max_rel_err <= 1e-3, "{report:?}");
}

#[test]
fn camera_order_does_not_matter() {
    let cfg = micro(false, LiftMode::Learned);
    let rig = micro_rig();
    let inp = inputs(&rig, 4);
    let store = random_store::<f32>(&cfg, 6);
    let a = run(&cfg, &store, &batch(&inp, &[0, 1], &inp.cams));
    let b = run(&cfg, &store, &batch(&inp, &[1, 0], &inp.cams));
    assert!(a.max_abs_diff(&b) <= 1e-5, "{}", a.max_abs_diff(&b));
}

#[test]
fn out_of_view_camera_changes_nothing() {
    let cfg = micro(false, LiftMode::Learned);
    let rig = micro_rig();
    let mut inp = inputs(&rig, 5);
    let store = random_store::<f32>(&cfg, 7);
    let a = run(&cfg, &store, &batch(&inp, &[0, 1], &inp.cams));
    let mut far = inp.cams[0];
    far.extrinsics = Extrinsics::looking(0.0, 0.0, [500.0, 0.0, 1.6]);
    inp.cams.push(far);
    inp.images.push(inp.images[1].clone());
    inp.depths.push(inp.depths[1].clone());
    let b = run(&cfg, &store, &batch(&inp, &[0, 1, 2], &inp.cams));
    assert_eq!(a.data(), b.data());
}

#[test]
fn quarter_turn_of_the_rig_rotates_the_output() {
    let cfg = micro(true, LiftMode::Learned);
    let rig = micro_rig();
    let inp = inputs(&rig, 6);
    let store = random_store::<f32>(&cfg, 8);
    let base = run(&cfg, &store, &batch(&inp, &[0, 1], &inp.cams));
    for k in 1..4 {
        let turned = rig.transformed(&rot_z_quarter(k), [0.0; 3]);
        let out = run(&cfg, &store, &batch(&inp, &[0, 1], turned.cameras()));
        let d = out.max_abs_diff(&base.rot90(k).unwrap());
        assert!(d <= 1e-4, "k={k}: {d}");
    }
}

#[test]
fn no_cameras_gives_the_same_prediction_for_every_sample() {
    let cfg = micro(false, LiftMode::Learned);
    let store = random_store::<f32>(&cfg, 9);
    let empty = Batch { size: 2, views: vec![] };
    let out = run(&cfg, &store, &empty);
    assert_eq!(out.shape(), &[2, 1, 16, 16]);
    assert!(out.all_finite());
    assert_eq!(out.data()[..256], out.data()[256..]);
}

#[test]
fn oracle_and_uniform_modes_run_and_differ() {
    let rig = micro_rig();
    let inp = inputs(&rig, 7);
    let outs: Vec<Tensor<f32>> = [LiftMode::Learned, LiftMode::Uniform, LiftMode::Oracle]
        .into_iter()
        .map(|m| {
            let cfg = micro(false, m);
            run(&cfg, &random_store::<f32>(&cfg, 10), &batch(&inp, &[0, 1], &inp.cams))
        })
        .collect();
    assert!(outs[0].max_abs_diff(&outs[1]) > 0.0);
    assert!(outs[1].max_abs_diff(&outs[2]) > 0.0);
}

#[test]
fn cnn_baseline_shapes_and_slot_checks() {
    let mut cfg = micro(false, LiftMode::Learned);
    cfg.arch = Arch::Cnn;
    cfg.head.in_channels = 6;
    let rig = micro_rig();
    let inp = inputs(&rig, 8);
    let store = random_store::<f32>(&cfg, 11);
    assert!(!store.contains("enc.depth.w"));
    let full = run(&cfg, &store, &batch(&inp, &[0, 1], &inp.cams));
    let one = run(&cfg, &store, &batch(&inp, &[1], &inp.cams));
    assert_eq!(full.shape(), &[1, 1, 16, 16]);
    assert!(full.max_abs_diff(&one) > 0.0);
    cfg.head.in_channels = 5;
    assert!(init_model::<f32>(&cfg, 0).is_err());
}

#[test]
fn config_validation() {
    let mut cfg = micro(false, LiftMode::Learned);
    cfg.image_height = 18;
    assert!(cfg.validate().is_err());
    let mut cfg = micro(false, LiftMode::Learned);
    cfg.encoder.depth_bins = 5;
    assert!(cfg.validate().is_err());
    let mut cfg = micro(false, LiftMode::Learned);
    cfg.grid = BevGridSpec::square(5.0, 1.0).unwrap();
    assert!(cfg.validate().is_err());
}

#[test]
fn oracle_alpha_is_the_depth_histogram_of_each_cell() {
    let bins = DepthBinSpec::new(2.0, 1.0, 6).unwrap();
    let (h, w) = (4, 8);
    let mut depth = vec![0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            depth[r * w + c] = match (c / 4, r) {
                // Left cell: 10 pixels near 4 m, 6 pixels near 6 m.
                (0, _) if r * 4 + c % 4 < 10 => 4.2,
                (0, _) => 5.9,
                // Right cell: half sky, half 3 m.
                (_, 0 | 1) => f32::INFINITY,
                _ => 3.1,
            };
        }
    }
    let mut g = Graph::<f64>::new();
    let alpha = g.constant(Tensor::zeros([1, 6, 1, 2]));
    let context = g.constant(Tensor::ones([1, 1, 1, 2]));
    let lo = LiftOutput { alpha, context };
    let depth = Tensor::from_vec([1, h, w], depth).unwrap();
    let o = lift_mode_override(&mut g, lo, LiftMode::Oracle, &bins, Some(&depth)).unwrap();
    let a = g.value(o.alpha).data().to_vec();
    let left: Vec<f64> = (0..6).map(|d| a[d * 2]).collect();
    let right: Vec<f64> = (0..6).map(|d| a[d * 2 + 1]).collect();
    assert_eq!(left, vec![0.0, 0.0, 10.0 / 16.0, 0.0, 6.0 / 16.0, 0.0]);
    assert_eq!(right, vec![0.0, 0.5, 0.0, 0.0, 0.0, 0.5]);

    let bad = Tensor::from_vec([1, 4, 4], vec![3.0f32; 16]).unwrap();
    assert!(lift_mode_override(&mut g, lo, LiftMode::Oracle, &bins, Some(&bad)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(30))]

    /// The depth distribution is a softmax, so summing lifted features over
    /// depth returns the context vector.
    #[test]
    fn lifted_features_sum_to_context(seed in any::<u64>()) {
        let enc = EncoderConfig { widths: vec![4], depth_bins: 5, context: 3 };
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_encoder(&mut store, "e", &enc, &mut rng).unwrap();
        let mut ctx = Ctx::new(&store, false);
        let img = ctx.graph.constant(Tensor::uniform([2, 3, 4, 6], 0.0, 1.0, &mut rng));
        let lo = encode(&mut ctx, img, &enc, "e").unwrap();
        let alpha = ctx.graph.value(lo.alpha).clone();
        let context = ctx.graph.value(lo.context).clone();
        let f = lift_features(&mut ctx.graph, lo).unwrap();
        let f = ctx.graph.value(f).clone();
        prop_assert_eq!(f.shape(), &[2, 5, 2, 3, 3]);
        let (d, plane, c) = (5, 6, 3);
        for m in 0..2 {
            for p in 0..plane {
                let asum: f64 = (0..d).map(|k| alpha.data()[(m * d + k) * plane + p]).sum();
                prop_assert!((asum - 1.0).abs() < 1e-12);
                for ch in 0..c {
                    let fsum: f64 = (0..d).map(|k| f.data()[((m * d + k) * plane + p) * c + ch]).sum();
                    prop_assert!((fsum - context.data()[(m * c + ch) * plane + p]).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn outer_product_layout() {
    let mut g = Graph::<f64>::new();
    let alpha = g.constant(Tensor::from_vec([1, 2, 1, 2], vec![0.1, 0.2, 0.9, 0.8]).unwrap());
    let context = g.constant(Tensor::from_vec([1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let f = lift_features(&mut g, LiftOutput { alpha, context }).unwrap();
    // [m, d, h, w, c]
    let want = [0.1 * 1.0, 0.1 * 3.0, 0.2 * 2.0, 0.2 * 4.0, 0.9 * 1.0, 0.9 * 3.0, 0.8 * 2.0, 0.8 * 4.0];
    for (a, b) in g.value(f).data().iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
}

/// Cell of `(ix, iy)` after `k` quarter turns of the ego frame.
fn turned_cell(grid: &BevGridSpec, (mut ix, mut iy): (usize, usize), k: usize) -> (usize, usize) {
    for _ in 0..k {
        (ix, iy) = (grid.nx() - 1 - iy, ix);
    }
    (ix, iy)
}

fn cells_off_by_rotation(d0: f64) -> usize {
    let rig = CameraRig::toy4(64, 64, 100.0).unwrap();
    let bins = DepthBinSpec::new(d0, 1.0, 12).unwrap();
    let grid = BevGridSpec::square(12.0, 0.75).unwrap();
    let base = lss_core::camera::build_frustum(&rig, bins, 8).unwrap();
    let mut off = 0;
    for k in 1..4 {
        let turned = lss_core::camera::build_frustum(&rig.transformed(&rot_z_quarter(k), [0.0; 3]), bins, 8).unwrap();
        for (a, b) in base.iter().zip(&turned) {
            for (p, q) in a.coords.iter().zip(&b.coords) {
                let want = grid.cell_of(p[0], p[1]).map(|c| turned_cell(&grid, c, k));
                off += (grid.cell_of(q[0], q[1]) != want) as usize;
            }
        }
    }
    off
}

#[test]
fn depth_planes_on_cell_edges_break_rotated_binning() {
    // With the 0.5 m mount offset, planes at 4, 7, 10 and 13 m sit exactly on
    // 0.75 m cell edges, where floor binning cannot follow a rotation.
    assert!(cells_off_by_rotation(2.0) > 0);
    assert_eq!(cells_off_by_rotation(2.2), 0);
}
