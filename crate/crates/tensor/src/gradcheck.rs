//! Central finite-difference checks for analytic gradients.
//!
//! Everything here runs in `f64`. The numeric side only ever evaluates the
//! forward function, so it shares no code with the backward passes it
//! judges.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Upper bound on coordinates probed per input; inputs with more
    /// elements are subsampled with a seeded RNG.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            max_coords: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// `max |a - n| / max(|a|, |n|, floor)` where `floor` is 1e-3 of the
    /// largest gradient magnitude seen, so entries that are tiny compared to
    /// the gradient's scale are judged in absolute terms.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// `(input, coordinate, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares `analytic[i]` (the claimed gradient of `eval` w.r.t.
/// `inputs[i]`) against central differences of `eval`.
pub fn compare_with_finite_differences(
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    eval: impl Fn(&[Tensor<f64>]) -> Result<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    assert_eq!(inputs.len(), analytic.len(), "one analytic gradient per input");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pairs = Vec::new();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        assert_eq!(input.shape(), analytic[i].shape(), "gradient shape for input {i}");
        let n = input.numel();
        let coords: Vec<usize> = if n <= cfg.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for j in coords {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + cfg.step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - cfg.step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            pairs.push((i, j, analytic[i].data()[j], numeric));
        }
    }
    let scale = pairs.iter().map(|&(_, _, a, n)| a.abs().max(n.abs())).fold(0.0, f64::max);
    let floor = (1e-3 * scale).max(1e-10);
    let mut report = GradCheckReport {
        checked: pairs.len(),
        ..Default::default()
    };
    for (i, j, a, n) in pairs {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(floor);
        report.max_abs_err = report.max_abs_err.max(abs);
        if rel > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(rel);
            report.worst = Some((i, j, a, n));
        }
    }
    Ok(report)
}

/// Gradchecks a scalar function built on a [`Graph`]. `f` receives one
/// variable per input tensor and returns the scalar output.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    compare_with_finite_differences(
        inputs,
        &analytic,
        |xs| {
            let mut g = Graph::<f64>::new();
            let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
            let out = f(&mut g, &vars)?;
            Ok(g.value(out).item())
        },
        cfg,
    )
}
