//! The BEV network: a stride-2 stem, three residual stages, and an
//! upsampling path that fuses the deepest stage back into the first.

use lss_tensor::nn::{init_bn, init_conv};
use lss_tensor::{Ctx, Float, Graph, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BevHeadConfig {
    pub in_channels: usize,
    pub stem: usize,
    /// Widths of the three residual stages (strides 1, 2, 2 after the stem).
    pub widths: [usize; 3],
    pub blocks_per_stage: usize,
    pub up: usize,
    pub out_channels: usize,
    /// Average the head over the four 90° rotations of its input, which
    /// makes it exactly equivariant to quarter turns of the grid.
    pub symmetrize: bool,
}

fn init_block<T: Float, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut R) -> Result<()> {
    init_conv(store, &format!("{name}.conv1"), cout, cin, 3, false, rng)?;
    init_bn(store, &format!("{name}.conv1.bn"), cout)?;
    init_conv(store, &format!("{name}.conv2"), cout, cout, 3, false, rng)?;
    init_bn(store, &format!("{name}.conv2.bn"), cout)?;
    if stride != 1 || cin != cout {
        init_conv(store, &format!("{name}.down"), cout, cin, 1, false, rng)?;
        init_bn(store, &format!("{name}.down.bn"), cout)?;
    }
    Ok(())
}

fn block<T: Float>(ctx: &mut Ctx<'_, T>, x: Var, name: &str, stride: usize) -> Result<Var> {
    let y = ctx.conv_bn_relu(x, &format!("{name}.conv1"), stride, 1)?;
    let y = ctx.conv(y, &format!("{name}.conv2"), 1, 1)?;
    let y = ctx.batch_norm(y, &format!("{name}.conv2.bn"))?;
    let down = format!("{name}.down");
    let skip = if ctx.store().contains(&format!("{down}.w")) {
        let s = ctx.conv(x, &down, stride, 0)?;
        ctx.batch_norm(s, &format!("{down}.bn"))?
    } else {
        x
    };
    let y = ctx.graph.add(y, skip)?;
    Ok(ctx.graph.relu(y)?)
}

fn stage_plan(cfg: &BevHeadConfig) -> Vec<(String, usize, usize, usize)> {
    let mut plan = Vec::new();
    let mut cin = cfg.stem;
    for (s, (&w, stride)) in cfg.widths.iter().zip([1, 2, 2]).enumerate() {
        for b in 0..cfg.blocks_per_stage.max(1) {
            plan.push((format!("layer{}.{b}", s + 1), cin, w, if b == 0 { stride } else { 1 }));
            cin = w;
        }
    }
    plan
}

pub fn init_bev_head<T: Float, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, cfg: &BevHeadConfig, rng: &mut R) -> Result<()> {
    init_conv(store, &format!("{prefix}.stem"), cfg.stem, cfg.in_channels, 7, false, rng)?;
    init_bn(store, &format!("{prefix}.stem.bn"), cfg.stem)?;
    for (name, cin, cout, stride) in stage_plan(cfg) {
        init_block(store, &format!("{prefix}.{name}"), cin, cout, stride, rng)?;
    }
    init_block(store, &format!("{prefix}.fuse"), cfg.widths[0] + cfg.widths[2], cfg.up, 1, rng)?;
    init_conv(store, &format!("{prefix}.up2"), cfg.up, cfg.up, 3, false, rng)?;
    init_bn(store, &format!("{prefix}.up2.bn"), cfg.up)?;
    init_conv(store, &format!("{prefix}.out"), cfg.out_channels, cfg.up, 1, true, rng)?;
    // Zero output layer: the untrained head predicts 0 logits everywhere.
    store.value_mut(&format!("{prefix}.out.w"))?.data_mut().fill(T::zero());
    Ok(())
}

fn forward_once<T: Float>(ctx: &mut Ctx<'_, T>, x: Var, cfg: &BevHeadConfig, prefix: &str) -> Result<Var> {
    let s = ctx.graph.shape(x).to_vec();
    let x = ctx.conv_bn_relu(x, &format!("{prefix}.stem"), 2, 3)?;
    let mut feats = Vec::new();
    let mut y = x;
    let plan = stage_plan(cfg);
    for (i, (name, _, _, stride)) in plan.iter().enumerate() {
        y = block(ctx, y, &format!("{prefix}.{name}"), *stride)?;
        let last_of_stage = plan.get(i + 1).is_none_or(|next| next.0.split('.').next() != name.split('.').next());
        if last_of_stage {
            feats.push(y);
        }
    }
    let (x1, x3) = (feats[0], feats[2]);
    let s1 = ctx.graph.shape(x1).to_vec();
    let up = ctx.graph.resize_bilinear(x3, s1[2], s1[3])?;
    let cat = ctx.graph.concat(&[x1, up], 1)?;
    let y = block(ctx, cat, &format!("{prefix}.fuse"), 1)?;
    let y = ctx.graph.resize_bilinear(y, s[2], s[3])?;
    let y = ctx.conv_bn_relu(y, &format!("{prefix}.up2"), 1, 1)?;
    Ok(ctx.conv(y, &format!("{prefix}.out"), 1, 0)?)
}

/// `[B, in, X, Y] → [B, out, X, Y]`. `X` and `Y` must be multiples of 8.
pub fn bev_forward<T: Float>(ctx: &mut Ctx<'_, T>, x: Var, cfg: &BevHeadConfig, prefix: &str) -> Result<Var> {
    let s = ctx.graph.shape(x).to_vec();
    if s.len() != 4 || s[1] != cfg.in_channels || s[2] % 8 != 0 || s[3] % 8 != 0 || s[2] == 0 || s[3] == 0 {
        return Err(CoreError::Shape {
            op: "bev_forward",
            msg: format!("expected [B, {}, X, Y] with X, Y multiples of 8, got {s:?}", cfg.in_channels),
        });
    }
    if !cfg.symmetrize {
        return forward_once(ctx, x, cfg, prefix);
    }
    if s[2] != s[3] {
        return Err(CoreError::Shape {
            op: "bev_forward",
            msg: format!("a symmetrized head needs a square grid, got {}×{}", s[2], s[3]),
        });
    }
    let mut outs = Vec::with_capacity(4);
    for r in 0..4 {
        let xr = ctx.graph.rot90(x, r)?;
        let yr = forward_once(ctx, xr, cfg, prefix)?;
        outs.push(ctx.graph.rot90(yr, (4 - r) % 4)?);
    }
    let mut acc = outs[0];
    for &o in &outs[1..] {
        acc = ctx.graph.add(acc, o)?;
    }
    Ok(ctx.graph.scale(acc, 0.25)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Vehicle,
    Drivable,
    Lane,
    Plan,
}

impl Task {
    /// Positive-class weight of the segmentation loss.
    pub fn positive_weight(self) -> Option<f64> {
        match self {
            Task::Vehicle | Task::Drivable => Some(1.0),
            Task::Lane => Some(5.0),
            Task::Plan => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Vehicle => "vehicle",
            Task::Drivable => "drivable",
            Task::Lane => "lane",
            Task::Plan => "plan",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vehicle" => Ok(Task::Vehicle),
            "drivable" => Ok(Task::Drivable),
            "lane" => Ok(Task::Lane),
            "plan" => Ok(Task::Plan),
            other => Err(CoreError::Config(format!("unknown task `{other}` (vehicle, drivable, lane, plan)"))),
        }
    }
}

/// Weighted binary cross-entropy with the task's positive weight.
pub fn segmentation_loss<T: Float>(g: &mut Graph<T>, logits: Var, targets: &Tensor<T>, task: &str) -> Result<Var> {
    let task: Task = task.parse()?;
    let pw = task
        .positive_weight()
        .ok_or_else(|| CoreError::Config(format!("task `{}` is not a segmentation task", task.name())))?;
    Ok(g.bce_with_logits(logits, targets, pw)?)
}

/// Running intersection and union counts; IOU is taken over everything
/// added.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IouCounts {
    pub intersection: u64,
    pub union: u64,
}

impl IouCounts {
    /// Predicted positive where `sigmoid(logit) > threshold`.
    pub fn add(&mut self, logits: &[f32], targets: &[f32], threshold: f64) {
        assert_eq!(logits.len(), targets.len(), "iou: logits and targets differ in length");
        let cut = (threshold / (1.0 - threshold)).ln();
        for (&l, &t) in logits.iter().zip(targets) {
            let p = (l as f64) > cut;
            let g = t > 0.5;
            self.intersection += (p && g) as u64;
            self.union += (p || g) as u64;
        }
    }

    pub fn merge(&mut self, other: IouCounts) {
        self.intersection += other.intersection;
        self.union += other.union;
    }

    /// 1.0 when both prediction and target are empty.
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

pub fn iou_metric(logits: &[f32], targets: &[f32], threshold: f64) -> f64 {
    let mut c = IouCounts::default();
    c.add(logits, targets, threshold);
    c.iou()
}
