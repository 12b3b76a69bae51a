//! Timing the analytic pooling kernel against the naive scatter-add and
//! the autodiff-composed pooling.

use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Result};
use lss_core::splat::{assign_bins, frustum_pool, frustum_pool_composed, frustum_pool_reference, BevGridSpec, BinAssignment};
use lss_tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CSV_HEADER: &str = "P,C,kernel_forward_ms,kernel_backward_ms,reference_forward_ms,reference_autograd_backward_ms,speedup";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub points: usize,
    pub channels: usize,
    pub kernel_forward_ms: f64,
    pub kernel_backward_ms: f64,
    pub reference_forward_ms: f64,
    pub reference_backward_ms: f64,
}

impl BenchRow {
    /// Reference backward over kernel backward.
    pub fn speedup(&self) -> f64 {
        self.reference_backward_ms / self.kernel_backward_ms
    }

    pub fn csv(&self) -> String {
        format!(
            "{},{},{:.4},{:.4},{:.4},{:.4},{:.4}",
            self.points,
            self.channels,
            self.kernel_forward_ms,
            self.kernel_backward_ms,
            self.reference_forward_ms,
            self.reference_backward_ms,
            self.speedup()
        )
    }
}

/// A random cloud over a 0.5 m, 48×48 grid with some points off the grid.
pub struct Cloud {
    pub spec: BevGridSpec,
    pub batch: usize,
    pub features: Tensor<f32>,
    pub assign: Arc<BinAssignment>,
    pub grad: Tensor<f32>,
}

impl Cloud {
    pub fn new(points: usize, channels: usize, seed: u64) -> Result<Self> {
        let spec = BevGridSpec::square(12.0, 0.5)?;
        let batch = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords: Vec<[f64; 3]> = (0..points)
            .map(|_| [rng.random_range(-14.0..14.0), rng.random_range(-14.0..14.0), rng.random_range(-1.0..3.0)])
            .collect();
        let owner: Vec<u32> = (0..points).map(|_| rng.random_range(0..batch as u32)).collect();
        let assign = Arc::new(assign_bins(&coords, &owner, &spec, batch)?);
        let features = Tensor::uniform([points, channels], -1.0, 1.0, &mut rng);
        let grad = Tensor::uniform([batch, channels, spec.nx(), spec.ny()], -1.0, 1.0, &mut rng);
        Ok(Cloud {
            spec,
            batch,
            features,
            assign,
            grad,
        })
    }

    /// Builds `sum(pool(features) * grad)` on a fresh graph with either pooling.
    fn graph(&self, composed: bool) -> Result<(Graph<f32>, Var, Var, Var)> {
        let mut g = Graph::new();
        let x = g.variable(self.features.clone());
        let out = if composed {
            frustum_pool_composed(&mut g, x, &self.assign, &self.spec, self.batch)?
        } else {
            frustum_pool(&mut g, x, &self.assign, &self.spec, self.batch)?
        };
        let w = g.constant(self.grad.clone());
        let prod = g.mul(out, w)?;
        let loss = g.sum_all(prod)?;
        Ok((g, x, out, loss))
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn max_abs(a: &Tensor<f32>) -> f64 {
    a.data().iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()))
}

/// Outputs and gradients of both poolings agree with the naive scatter-add
/// before anything is timed. The composed path sums in f32, so it gets a
/// tolerance scaled by the cloud's magnitude.
pub fn correctness_gate(cloud: &Cloud) -> Result<()> {
    let bins = &cloud.assign.bins;
    let reference = frustum_pool_reference(&cloud.features, bins, &cloud.spec, cloud.batch)?;
    let scale = 1.0 + max_abs(&reference);
    let (gk, xk, ok, lk) = cloud.graph(false)?;
    let (gc, xc, oc, lc) = cloud.graph(true)?;
    let dk = gk.value(ok).max_abs_diff(&reference);
    let dc = gc.value(oc).max_abs_diff(&reference);
    if dk > 1e-5 * scale {
        bail!("kernel forward differs from the reference by {dk}");
    }
    if dc > 1e-4 * scale {
        bail!("composed forward differs from the reference by {dc}");
    }
    let (mut gk, mut gc) = (gk, gc);
    gk.backward(lk)?;
    gc.backward(lc)?;
    let gradk = gk.grad(xk).expect("features take a gradient");
    let gradc = gc.grad(xc).expect("features take a gradient");
    let db = gradk.max_abs_diff(gradc);
    if db > 1e-4 {
        bail!("kernel and composed backward differ by {db}");
    }
    Ok(())
}

pub fn bench_size(points: usize, channels: usize, reps: usize, seed: u64) -> Result<BenchRow> {
    let cloud = Cloud::new(points, channels, seed)?;
    correctness_gate(&cloud)?;
    let reps = reps.max(10);
    let (mut kf, mut kb, mut rf, mut rb) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..reps {
        let t = Instant::now();
        let (mut g, _, _, loss) = cloud.graph(false)?;
        kf.push(ms(t));
        let t = Instant::now();
        g.backward(loss)?;
        kb.push(ms(t));

        let t = Instant::now();
        let r = frustum_pool_reference(&cloud.features, &cloud.assign.bins, &cloud.spec, cloud.batch)?;
        rf.push(ms(t));
        std::hint::black_box(r);

        let (mut g, _, _, loss) = cloud.graph(true)?;
        let t = Instant::now();
        g.backward(loss)?;
        rb.push(ms(t));
    }
    Ok(BenchRow {
        points,
        channels,
        kernel_forward_ms: median(kf),
        kernel_backward_ms: median(kb),
        reference_forward_ms: median(rf),
        reference_backward_ms: median(rb),
    })
}

/// Sizes 10⁴, 10⁵, … up to `max_points` (which is always included).
pub fn sizes_up_to(max_points: usize) -> Vec<usize> {
    let mut v = Vec::new();
    let mut p = 10_000;
    while p < max_points {
        v.push(p);
        p *= 10;
    }
    v.push(max_points);
    v
}

pub fn bench_pool(max_points: usize, channels: usize, reps: usize, seed: u64) -> Result<Vec<BenchRow>> {
    sizes_up_to(max_points)
        .into_iter()
        .enumerate()
        .map(|(i, p)| bench_size(p, channels, reps, seed.wrapping_add(i as u64)))
        .collect()
}
