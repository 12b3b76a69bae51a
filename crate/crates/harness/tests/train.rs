use lss_core::synth::{generate_dataset, Sample};
use lss_harness::config::RunConfig;
use lss_harness::eval::{run_eval, EvalOptions};
use lss_harness::train::{metric, train, Model};

const TINY: &str = "
seed = 3
[rig]
height = 16
width = 16
[depth]
d0 = 2
delta = 2
bins = 4
[grid]
half = 6
cell = 0.75
[model]
context = 4
encoder = 4,8
stem = 4
head = 4,8,8
up = 8
[train]
steps = 4
batch = 2
checkpoint_every = 2
";

fn tiny(extra: &[(&str, &str, &str)]) -> RunConfig {
    let mut c = RunConfig::from_text(TINY).unwrap();
    for (s, k, v) in extra {
        c.set(s, k, v).unwrap();
    }
    c
}

fn data(c: &RunConfig, seed: u64, n: usize) -> Vec<Sample> {
    generate_dataset(seed, n, &c.rig().unwrap(), &c.world().unwrap()).unwrap()
}

#[test]
fn zero_steps_report_the_initial_metric() {
    let c = tiny(&[("train", "steps", "0")]);
    let (tr, va) = (data(&c, 1, 4), data(&c, 2, 4));
    let dir = tempfile::tempdir().unwrap();
    let out = train(&c, &tr, &va, Some(dir.path())).unwrap();
    assert!(out.losses.is_empty());
    assert_eq!(out.metrics, out.initial);
    let report = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert!(report.starts_with("metric,value\nsteps,0\ninitial_iou,"), "{report}");
}

#[test]
fn inactive_augmentation_is_plain_training() {
    let plain = tiny(&[]);
    let zeroed = tiny(&[("augment", "drop_n", "0"), ("augment", "noise_rot", "0"), ("augment", "noise_trans", "0")]);
    let (tr, va) = (data(&plain, 1, 6), data(&plain, 2, 3));
    let a = train(&plain, &tr, &va, None).unwrap();
    let b = train(&zeroed, &tr, &va, None).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.model.store, b.model.store);
    // Turning dropout on changes the run.
    let dropped = tiny(&[("augment", "drop_n", "1")]);
    assert_ne!(train(&dropped, &tr, &va, None).unwrap().losses, a.losses);
}

#[test]
fn run_directory_holds_checkpoints_and_reports() {
    let c = tiny(&[]);
    let (tr, va) = (data(&c, 1, 4), data(&c, 2, 3));
    let dir = tempfile::tempdir().unwrap();
    let out = train(&c, &tr, &va, Some(dir.path())).unwrap();
    for f in ["config.txt", "loss.csv", "report.csv", "model.ckpt", "ckpt_2.ckpt", "ckpt_4.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert_eq!(RunConfig::from_text(&std::fs::read_to_string(dir.path().join("config.txt")).unwrap()).unwrap(), c);
    let loss = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 5);
    // Re-evaluating the saved model reproduces the reported metric exactly.
    let model = Model::load(&dir.path().join("model.ckpt")).unwrap();
    let rows = run_eval(&model, &va, &EvalOptions::default()).unwrap();
    assert_eq!(metric(&rows[0].metrics, "iou"), metric(&out.metrics, "iou"));
}

#[test]
fn non_finite_loss_aborts_with_the_step() {
    let c = tiny(&[]);
    let (mut tr, va) = (data(&c, 1, 4), data(&c, 2, 2));
    for s in &mut tr {
        s.images.data_mut()[0] = f32::NAN;
    }
    let err = train(&c, &tr, &va, None).err().expect("NaN input must abort");
    let err = format!("{err:#}");
    assert!(err.contains("at step 0") && err.contains("last finite loss"), "{err}");
}

#[test]
fn sweep_has_a_row_per_camera_and_full() {
    let c = tiny(&[]);
    let (tr, va) = (data(&c, 1, 4), data(&c, 2, 3));
    let out = train(&c, &tr, &va, None).unwrap();
    let rows = run_eval(
        &out.model,
        &va,
        &EvalOptions {
            sweep: true,
            ..EvalOptions::default()
        },
    )
    .unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.condition.as_str()).collect();
    assert_eq!(names, ["drop_cam_0", "drop_cam_1", "drop_cam_2", "drop_cam_3", "full"]);
}

#[test]
fn mismatched_rig_is_rejected() {
    let c = tiny(&[]);
    let (tr, va) = (data(&c, 1, 2), data(&c, 2, 2));
    let out = train(&c, &tr, &va, None).unwrap();
    let other = tiny(&[("rig", "kind", "toy6")]);
    assert!(run_eval(&out.model, &data(&other, 3, 2), &EvalOptions::default()).is_err());
    let bigger = tiny(&[("rig", "height", "32"), ("rig", "width", "32")]);
    assert!(run_eval(&out.model, &data(&bigger, 3, 2), &EvalOptions::default()).is_err());
}

/// A model trained on a camera subset runs on the full rig and on any other
/// subset without retraining.
#[test]
fn subset_trained_model_accepts_other_camera_sets() {
    let c = tiny(&[("rig", "cameras", "0,1,2")]);
    let (tr, va) = (data(&c, 1, 4), data(&c, 2, 2));
    let out = train(&c, &tr, &va, None).unwrap();
    for cams in [vec![0, 1, 2, 3], vec![3], vec![1, 2]] {
        let rows = run_eval(
            &out.model,
            &va,
            &EvalOptions {
                cameras: Some(cams),
                ..EvalOptions::default()
            },
        )
        .unwrap();
        assert!(metric(&rows[0].metrics, "iou").is_finite());
    }
}
