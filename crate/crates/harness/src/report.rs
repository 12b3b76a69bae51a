//! Heatmaps (binary PGM) and planned-trajectory overlays (binary PPM).
//!
//! Images show the BEV grid with forward (+x) up and left (+y) to the left.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use lss_core::bev_head::Task;
use lss_core::shoot::Trajectory;
use lss_core::splat::BevGridSpec;
use lss_core::synth::read_dataset;

use crate::data::ViewPolicy;
use crate::train::{evaluate, write_metrics, Condition, Model};

/// Pixels per BEV cell in overlays.
pub const OVERLAY_SCALE: usize = 4;
pub const OVERLAY_TOP: usize = 10;
pub const REPORT_SAMPLES: usize = 4;

const COLORS: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
];

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn to_byte(p: f32) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `[X, Y]` grid index to `(row, col)` in the displayed image.
fn pixel(ix: usize, iy: usize, nx: usize, ny: usize) -> (usize, usize) {
    (nx - 1 - ix, ny - 1 - iy)
}

/// 8-bit PGM of `values` (`[X, Y]`, already in `[0, 1]`).
pub fn pgm(values: &[f32], nx: usize, ny: usize) -> Vec<u8> {
    let mut img = vec![0u8; nx * ny];
    for ix in 0..nx {
        for iy in 0..ny {
            let (r, c) = pixel(ix, iy, nx, ny);
            img[r * ny + c] = to_byte(values[ix * ny + iy]);
        }
    }
    let mut out = format!("P5\n{ny} {nx}\n255\n").into_bytes();
    out.extend(img);
    out
}

/// PGM of `sigmoid(logits)`.
pub fn heatmap(logits: &[f32], nx: usize, ny: usize) -> Vec<u8> {
    let p: Vec<f32> = logits.iter().map(|&l| sigmoid(l)).collect();
    pgm(&p, nx, ny)
}

/// An RGB canvas over the cost map, upscaled by [`OVERLAY_SCALE`].
pub struct Overlay {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
    spec: BevGridSpec,
    pub polylines: usize,
}

impl Overlay {
    /// Grey background: low cost is bright.
    pub fn new(cost: &[f32], spec: &BevGridSpec) -> Self {
        let (nx, ny) = (spec.nx(), spec.ny());
        let (lo, hi) = cost.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let (w, h) = (ny * OVERLAY_SCALE, nx * OVERLAY_SCALE);
        let mut rgb = vec![0u8; w * h * 3];
        for ix in 0..nx {
            for iy in 0..ny {
                let g = to_byte(1.0 - (cost[ix * ny + iy] - lo) / span);
                let (r, c) = pixel(ix, iy, nx, ny);
                for dr in 0..OVERLAY_SCALE {
                    for dc in 0..OVERLAY_SCALE {
                        let o = ((r * OVERLAY_SCALE + dr) * w + c * OVERLAY_SCALE + dc) * 3;
                        rgb[o..o + 3].fill(g);
                    }
                }
            }
        }
        Overlay {
            width: w,
            height: h,
            rgb,
            spec: *spec,
            polylines: 0,
        }
    }

    /// Continuous ego `(x, y)` to image `(col, row)`.
    fn project(&self, x: f64, y: f64) -> (f64, f64) {
        let s = OVERLAY_SCALE as f64 / self.spec.cell;
        ((self.spec.y_max - y) * s, (self.spec.x_max - x) * s)
    }

    fn put(&mut self, col: i64, row: i64, color: [u8; 3]) {
        if col >= 0 && row >= 0 && (col as usize) < self.width && (row as usize) < self.height {
            let o = (row as usize * self.width + col as usize) * 3;
            self.rgb[o..o + 3].copy_from_slice(&color);
        }
    }

    fn segment(&mut self, a: (f64, f64), b: (f64, f64), color: [u8; 3]) {
        let n = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
        for i in 0..=n {
            let t = i as f64 / n as f64;
            let (c, r) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
            self.put(c.floor() as i64, r.floor() as i64, color);
        }
    }

    /// Draws the trajectory from the ego origin through its points.
    pub fn polyline(&mut self, tr: &Trajectory, color: [u8; 3]) {
        let mut prev = self.project(0.0, 0.0);
        for p in &tr.points {
            let next = self.project(p[0], p[1]);
            self.segment(prev, next, color);
            prev = next;
        }
        self.polylines += 1;
    }

    pub fn ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }
}

/// Indices of the `k` most probable templates, ties to the lower index.
pub fn top_indices(probs: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// The top-`OVERLAY_TOP` templates drawn over a cost map, one colour each.
pub fn plan_overlay(cost: &[f32], spec: &BevGridSpec, templates: &[Trajectory], probs: &[f32]) -> Overlay {
    let mut o = Overlay::new(cost, spec);
    for (n, i) in top_indices(probs, OVERLAY_TOP).into_iter().enumerate() {
        o.polyline(&templates[i], COLORS[n % COLORS.len()]);
    }
    o
}

/// Writes `<run>/report/`: `metrics.csv` on the validation set, a heatmap
/// per sample and, for planning runs, a cost heatmap plus a top-10 overlay.
pub fn emit_report(run_dir: &Path) -> Result<()> {
    let model = Model::load(&run_dir.join("model.ckpt"))?;
    let val = read_dataset(&model.run.val_data).with_context(|| format!("validation data {}", model.run.val_data.display()))?;
    let out = run_dir.join("report");
    fs::create_dir_all(&out)?;
    let metrics = evaluate(&model, &val, &Condition::clean(&model.run))?;
    write_metrics(&out.join("metrics.csv"), &metrics)?;

    let spec = model.cfg.grid;
    let (nx, ny) = (spec.nx(), spec.ny());
    let policy = ViewPolicy::all(model.run.training_cameras());
    for i in 0..val.len().min(REPORT_SAMPLES) {
        let views = policy.choose_eval(&val[i], i, model.run.seed)?;
        let raw = model.raw(&val, std::slice::from_ref(&views))?;
        if model.run.task == Task::Plan {
            let probs = model.predict(&val, std::slice::from_ref(&views))?;
            let cost = raw.data();
            let lo = cost.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = cost.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let span = if hi > lo { hi - lo } else { 1.0 };
            let norm: Vec<f32> = cost.iter().map(|&c| (c - lo) / span).collect();
            fs::write(out.join(format!("cost_{i}.pgm")), pgm(&norm, nx, ny))?;
            let planner = model.templates.as_ref().expect("planning model");
            let o = plan_overlay(cost, &spec, &planner.set.templates, probs.data());
            fs::write(out.join(format!("plan_{i}.ppm")), o.ppm())?;
        } else {
            fs::write(out.join(format!("heatmap_{i}.pgm")), heatmap(raw.data(), nx, ny))?;
        }
    }
    Ok(())
}
