//! Evaluation under test-time conditions: dropped cameras, extrinsic noise,
//! camera subsets and supersets, and the per-camera drop sweep.

use anyhow::{bail, Result};
use lss_core::synth::Sample;

use crate::data::{Drop, ViewPolicy};
use crate::train::{evaluate, Condition, Metrics, Model};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub condition: String,
    pub metrics: Metrics,
}

/// Options of one `lss eval` invocation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalOptions {
    /// Cameras to present; `None` keeps the model's training cameras.
    pub cameras: Option<Vec<usize>>,
    pub drop_cam: usize,
    pub noise_rot: f64,
    pub noise_trans: f64,
    /// One row per dropped camera plus a `full` row.
    pub sweep: bool,
}

impl EvalOptions {
    pub fn policy(&self, model: &Model) -> ViewPolicy {
        ViewPolicy {
            cameras: self.cameras.clone().unwrap_or_else(|| model.run.training_cameras()),
            drop: if self.drop_cam > 0 { Drop::Random(self.drop_cam) } else { Drop::None },
            noise_rot: self.noise_rot,
            noise_trans: self.noise_trans,
        }
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if let Some(c) = &self.cameras {
            parts.push(format!("cameras={}", c.iter().map(|k| k.to_string()).collect::<Vec<_>>().join("+")));
        }
        if self.drop_cam > 0 {
            parts.push(format!("drop={}", self.drop_cam));
        }
        if self.noise_rot != 0.0 || self.noise_trans != 0.0 {
            parts.push(format!("noise_rot={};noise_trans={}", self.noise_rot, self.noise_trans));
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join(";")
        }
    }
}

/// Checks the model's rig against the data before anything runs.
pub fn check_compatible(model: &Model, data: &[Sample]) -> Result<()> {
    let Some(s) = data.first() else {
        bail!("empty evaluation set");
    };
    let (h, w) = s.rig.image_size();
    if (h, w) != (model.cfg.image_height, model.cfg.image_width) {
        bail!("data images are {h}×{w}, model expects {}×{}", model.cfg.image_height, model.cfg.image_width);
    }
    if s.rig.len() != model.run.rig_size() {
        bail!("data rig has {} cameras, model was configured for {}", s.rig.len(), model.run.rig_size());
    }
    let raster = s.bev_vehicle.shape();
    if raster != [model.cfg.grid.nx(), model.cfg.grid.ny()] {
        bail!("data BEV rasters are {raster:?}, model grid is {}×{}", model.cfg.grid.nx(), model.cfg.grid.ny());
    }
    Ok(())
}

pub fn run_eval(model: &Model, data: &[Sample], opts: &EvalOptions) -> Result<Vec<EvalRow>> {
    check_compatible(model, data)?;
    let base = opts.policy(model);
    let seed = model.run.seed;
    let mut rows = Vec::new();
    if opts.sweep {
        for &k in &base.cameras {
            let policy = ViewPolicy {
                drop: Drop::Camera(k),
                ..base.clone()
            };
            rows.push(EvalRow {
                condition: format!("drop_cam_{k}"),
                metrics: evaluate(model, data, &Condition { policy, seed })?,
            });
        }
        rows.push(EvalRow {
            condition: "full".into(),
            metrics: evaluate(model, data, &Condition { policy: ViewPolicy { drop: Drop::None, ..base }, seed })?,
        });
    } else {
        rows.push(EvalRow {
            condition: opts.label(),
            metrics: evaluate(model, data, &Condition { policy: base, seed })?,
        });
    }
    Ok(rows)
}

pub fn rows_csv(rows: &[EvalRow]) -> String {
    let Some(first) = rows.first() else {
        return String::new();
    };
    let names: Vec<&str> = first.metrics.iter().map(|(n, _)| n.as_str()).collect();
    let mut s = format!("condition,{}\n", names.join(","));
    for r in rows {
        let vals: Vec<String> = r.metrics.iter().map(|(_, v)| v.to_string()).collect();
        s += &format!("{},{}\n", r.condition, vals.join(","));
    }
    s
}
