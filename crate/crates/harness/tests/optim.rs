use lss_harness::optim::{Adam, AdamConfig};
use lss_tensor::{ParamStore, Tensor};

fn store(values: &[f32]) -> ParamStore<f32> {
    let mut s = ParamStore::new();
    s.insert("w", Tensor::from_vec([values.len()], values.to_vec()).unwrap(), true).unwrap();
    s
}

fn grad(values: &[f32]) -> Vec<(String, Tensor<f32>)> {
    vec![("w".to_string(), Tensor::from_vec([values.len()], values.to_vec()).unwrap())]
}

/// Hand-rolled scalar Adam with L2 decay folded into the gradient.
struct ScalarAdam {
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarAdam {
    fn step(&mut self, w: f64, g: f64, c: &AdamConfig) -> f64 {
        self.t += 1;
        let g = g + c.weight_decay * w;
        self.m = c.beta1 * self.m + (1.0 - c.beta1) * g;
        self.v = c.beta2 * self.v + (1.0 - c.beta2) * g * g;
        let mh = self.m / (1.0 - c.beta1.powi(self.t));
        let vh = self.v / (1.0 - c.beta2.powi(self.t));
        w - c.lr * mh / (vh.sqrt() + c.eps)
    }
}

#[test]
fn first_step_moves_by_learning_rate() {
    let cfg = AdamConfig {
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    let mut s = store(&[0.5, -2.0]);
    let mut adam = Adam::new(cfg);
    adam.step(&mut s, &grad(&[1.0, 1.0])).unwrap();
    let w = s.value("w").unwrap().data().to_vec();
    assert!((0.5 - w[0] as f64 - 1e-3).abs() < 1e-6);
    assert!((-2.0 - w[1] as f64 - 1e-3).abs() < 1e-6);
    assert_eq!(adam.steps(), 1);
}

#[test]
fn zero_gradient_leaves_parameters_alone() {
    let cfg = AdamConfig {
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    let mut s = store(&[0.25, 3.0, -1.0]);
    let mut adam = Adam::new(cfg);
    for _ in 0..10 {
        adam.step(&mut s, &grad(&[0.0, 0.0, 0.0])).unwrap();
    }
    assert_eq!(s.value("w").unwrap().data(), &[0.25, 3.0, -1.0]);
}

#[test]
fn matches_scalar_reference_over_many_steps() {
    let cfg = AdamConfig {
        lr: 1e-2,
        weight_decay: 1e-3,
        ..AdamConfig::default()
    };
    let mut s = store(&[0.75]);
    let mut adam = Adam::new(cfg);
    let mut oracle = ScalarAdam { m: 0.0, v: 0.0, t: 0 };
    let mut w = 0.75f32 as f64;
    for i in 0..200 {
        // A gradient that changes sign and scale along the way.
        let g = ((i as f64) * 0.37).sin() * (1.0 + i as f64 / 50.0);
        let g = g as f32;
        adam.step(&mut s, &grad(&[g])).unwrap();
        w = oracle.step(w, g as f64, &cfg) as f32 as f64;
        let got = s.value("w").unwrap().data()[0] as f64;
        assert!((got - w).abs() <= 1e-7, "step {i}: {got} vs {w}");
    }
}

#[test]
fn shape_mismatch_is_an_error() {
    let mut s = store(&[1.0, 2.0]);
    let mut adam = Adam::new(AdamConfig::default());
    assert!(adam.step(&mut s, &grad(&[1.0])).is_err());
    assert!(adam.step(&mut s, &[("missing".into(), Tensor::zeros([2]))]).is_err());
}
