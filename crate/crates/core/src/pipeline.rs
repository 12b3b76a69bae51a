//! The full model: encode each camera, lift to a frustum, splat into the
//! BEV grid and run the BEV head. A geometry-free CNN baseline shares the
//! encoder and head.

use std::sync::Arc;

use lss_tensor::{Ctx, Float, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bev_head::{bev_forward, init_bev_head, BevHeadConfig, Task};
use crate::camera::{Camera, DepthBinSpec, FrustumGrid};
use crate::error::{CoreError, Result};
use crate::lift::{encode, encode_context, init_encoder, lift_features, lift_mode_override, EncoderConfig, LiftMode};
use crate::splat::{assign_bins, frustum_pool, BevGridSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    /// Lift, splat, BEV head.
    Lss,
    /// Per-camera features concatenated in camera order and resized
    /// bilinearly to the BEV grid, with no geometry.
    Cnn,
}

impl std::str::FromStr for Arch {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lss" => Ok(Arch::Lss),
            "cnn" => Ok(Arch::Cnn),
            other => Err(CoreError::Config(format!("unknown architecture `{other}` (lss, cnn)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub lift_mode: LiftMode,
    pub task: Task,
    pub image_height: usize,
    pub image_width: usize,
    /// Camera slots of the CNN baseline; the LSS model accepts any count.
    pub cameras: usize,
    pub bins: DepthBinSpec,
    pub encoder: EncoderConfig,
    pub grid: BevGridSpec,
    pub head: BevHeadConfig,
}

impl ModelConfig {
    pub fn downsample(&self) -> usize {
        self.encoder.downsample()
    }

    pub fn feature_size(&self) -> (usize, usize) {
        (self.image_height / self.downsample(), self.image_width / self.downsample())
    }

    pub fn validate(&self) -> Result<()> {
        let ds = self.downsample();
        if self.image_height % ds != 0 || self.image_width % ds != 0 {
            return Err(CoreError::Config(format!(
                "image {}×{} not divisible by feature stride {ds}",
                self.image_height, self.image_width
            )));
        }
        if self.grid.nx() % 8 != 0 || self.grid.ny() % 8 != 0 {
            return Err(CoreError::Config(format!("BEV grid {}×{} must be multiples of 8", self.grid.nx(), self.grid.ny())));
        }
        let expect_in = match self.arch {
            Arch::Lss => self.encoder.context,
            Arch::Cnn => self.encoder.context * self.cameras,
        };
        if self.head.in_channels != expect_in {
            return Err(CoreError::Config(format!(
                "head expects {} input channels, encoder provides {expect_in}",
                self.head.in_channels
            )));
        }
        if self.arch == Arch::Lss && self.encoder.depth_bins != self.bins.count {
            return Err(CoreError::Config(format!(
                "encoder predicts {} depth bins, depth spec has {}",
                self.encoder.depth_bins, self.bins.count
            )));
        }
        Ok(())
    }
}

pub fn init_model<T: Float>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut enc = cfg.encoder.clone();
    if cfg.arch == Arch::Cnn {
        enc.depth_bins = 0;
    }
    init_encoder(&mut store, "enc", &enc, &mut rng)?;
    init_bev_head(&mut store, "head", &cfg.head, &mut rng)?;
    Ok(store)
}

/// One camera image of one sample in a batch.
#[derive(Clone, Copy, Debug)]
pub struct View<'a> {
    /// Index of the sample within the batch.
    pub sample: usize,
    /// Camera slot in the rig, used by the CNN baseline's fixed ordering.
    pub slot: usize,
    pub camera: Camera,
    /// `[3, H, W]`.
    pub image: &'a [f32],
    /// `[H, W]` ground-truth depth; read only by the oracle lift.
    pub depth: &'a [f32],
}

#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub size: usize,
    pub views: Vec<View<'a>>,
}

fn image_tensor<T: Float>(cfg: &ModelConfig, views: &[View<'_>]) -> Result<Tensor<T>> {
    let (h, w) = (cfg.image_height, cfg.image_width);
    let mut data = Vec::with_capacity(views.len() * 3 * h * w);
    for (i, v) in views.iter().enumerate() {
        if v.image.len() != 3 * h * w || (v.camera.height, v.camera.width) != (h, w) {
            return Err(CoreError::Shape {
                op: "forward",
                msg: format!("view {i} is not a 3×{h}×{w} image"),
            });
        }
        data.extend(v.image.iter().map(|&x| T::of(x as f64)));
    }
    Ok(Tensor::from_vec([views.len(), 3, h, w], data)?)
}

/// The pooled BEV features `[B, C, X, Y]` of the LSS model.
pub fn splat_features<T: Float>(ctx: &mut Ctx<'_, T>, cfg: &ModelConfig, batch: &Batch<'_>) -> Result<Var> {
    let (nx, ny) = (cfg.grid.nx(), cfg.grid.ny());
    let c = cfg.encoder.context;
    if batch.views.is_empty() {
        return Ok(ctx.graph.constant(Tensor::zeros([batch.size, c, nx, ny])));
    }
    let images = ctx.graph.constant(image_tensor(cfg, &batch.views)?);
    let lo = encode(ctx, images, &cfg.encoder, "enc")?;
    let lo = if cfg.lift_mode == LiftMode::Oracle {
        let (h, w) = (cfg.image_height, cfg.image_width);
        let mut d = Vec::with_capacity(batch.views.len() * h * w);
        for v in &batch.views {
            d.extend_from_slice(v.depth);
        }
        let depth = Tensor::from_vec([batch.views.len(), h, w], d)?;
        lift_mode_override(&mut ctx.graph, lo, LiftMode::Oracle, &cfg.bins, Some(&depth))?
    } else {
        lift_mode_override(&mut ctx.graph, lo, cfg.lift_mode, &cfg.bins, None)?
    };
    let feats = lift_features(&mut ctx.graph, lo)?;
    let per_view = cfg.bins.count * cfg.feature_size().0 * cfg.feature_size().1;
    let feats = ctx.graph.reshape(feats, &[batch.views.len() * per_view, c])?;

    let mut coords = Vec::with_capacity(batch.views.len() * per_view);
    let mut owner = Vec::with_capacity(batch.views.len() * per_view);
    for v in &batch.views {
        let grid = FrustumGrid::new(&v.camera, cfg.bins, cfg.downsample())?;
        coords.extend_from_slice(&grid.coords);
        owner.extend(std::iter::repeat_n(v.sample as u32, grid.len()));
    }
    let assign = Arc::new(assign_bins(&coords, &owner, &cfg.grid, batch.size)?);
    frustum_pool(&mut ctx.graph, feats, &assign, &cfg.grid, batch.size)
}

fn cnn_features<T: Float>(ctx: &mut Ctx<'_, T>, cfg: &ModelConfig, batch: &Batch<'_>) -> Result<Var> {
    let (nx, ny) = (cfg.grid.nx(), cfg.grid.ny());
    let (c, n) = (cfg.encoder.context, cfg.cameras);
    let (hf, wf) = cfg.feature_size();
    let maps = if batch.views.is_empty() {
        ctx.graph.constant(Tensor::zeros([batch.size, n * c, hf, wf]))
    } else {
        let images = ctx.graph.constant(image_tensor(cfg, &batch.views)?);
        let ctxf = encode_context(ctx, images, &cfg.encoder, "enc")?;
        let flat = ctx.graph.reshape(ctxf, &[batch.views.len(), c * hf * wf])?;
        let mut rows = Vec::with_capacity(batch.views.len());
        for v in &batch.views {
            if v.slot >= n {
                return Err(CoreError::Config(format!("camera slot {} but the CNN baseline has {n} slots", v.slot)));
            }
            rows.push((v.sample * n + v.slot) as u32);
        }
        let dense = ctx.graph.scatter_rows(flat, Arc::new(rows), batch.size * n)?;
        ctx.graph.reshape(dense, &[batch.size, n * c, hf, wf])?
    };
    Ok(ctx.graph.resize_bilinear(maps, nx, ny)?)
}

/// Logits `[B, out, X, Y]` (segmentation) or a cost map `[B, 1, X, Y]`.
pub fn forward<T: Float>(ctx: &mut Ctx<'_, T>, cfg: &ModelConfig, batch: &Batch<'_>) -> Result<Var> {
    let bev = match cfg.arch {
        Arch::Lss => splat_features(ctx, cfg, batch)?,
        Arch::Cnn => cnn_features(ctx, cfg, batch)?,
    };
    bev_forward(ctx, bev, &cfg.head, "head")
}
