//! Per-camera encoder and the outer product that lifts image features into
//! a frustum of depth-weighted context vectors.

use lss_tensor::nn::{init_bn, init_conv};
use lss_tensor::{Ctx, Float, Graph, ParamStore, Tensor, Var};
use rand::Rng;

use crate::camera::DepthBinSpec;
use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// One stride-2 conv block per entry; the feature stride is
    /// `2^widths.len()`.
    pub widths: Vec<usize>,
    /// Depth bins `|D|`; zero builds a context-only encoder.
    pub depth_bins: usize,
    pub context: usize,
}

impl EncoderConfig {
    pub fn downsample(&self) -> usize {
        1 << self.widths.len()
    }
}

pub fn init_encoder<T: Float, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, cfg: &EncoderConfig, rng: &mut R) -> Result<()> {
    let mut cin = 3;
    for (i, &w) in cfg.widths.iter().enumerate() {
        let name = format!("{prefix}.block{i}");
        init_conv(store, &name, w, cin, 3, false, rng)?;
        init_bn(store, &format!("{name}.bn"), w)?;
        cin = w;
    }
    if cfg.depth_bins > 0 {
        init_conv(store, &format!("{prefix}.depth"), cfg.depth_bins, cin, 1, true, rng)?;
    }
    init_conv(store, &format!("{prefix}.context"), cfg.context, cin, 1, true, rng)?;
    Ok(())
}

/// Depth distribution and context per feature pixel.
#[derive(Clone, Copy, Debug)]
pub struct LiftOutput {
    /// `[M, |D|, Hf, Wf]`, softmax over axis 1.
    pub alpha: Var,
    /// `[M, C, Hf, Wf]`.
    pub context: Var,
}

fn trunk<T: Float>(ctx: &mut Ctx<'_, T>, images: Var, cfg: &EncoderConfig, prefix: &str) -> Result<Var> {
    let s = ctx.graph.shape(images).to_vec();
    if s.len() != 4 || s[1] != 3 {
        return Err(CoreError::Shape {
            op: "encode",
            msg: format!("images must be [M, 3, H, W], got {s:?}"),
        });
    }
    let ds = cfg.downsample();
    if s[2] % ds != 0 || s[3] % ds != 0 {
        return Err(CoreError::Shape {
            op: "encode",
            msg: format!("image {}×{} not divisible by feature stride {ds}", s[2], s[3]),
        });
    }
    let mut x = images;
    for i in 0..cfg.widths.len() {
        x = ctx.conv_bn_relu(x, &format!("{prefix}.block{i}"), 2, 1)?;
    }
    Ok(x)
}

/// Runs the encoder on `[M, 3, H, W]` images in `[0, 1]`.
pub fn encode<T: Float>(ctx: &mut Ctx<'_, T>, images: Var, cfg: &EncoderConfig, prefix: &str) -> Result<LiftOutput> {
    if cfg.depth_bins == 0 {
        return Err(CoreError::Config("encode needs depth bins; use encode_context for a context-only encoder".into()));
    }
    let x = trunk(ctx, images, cfg, prefix)?;
    let logits = ctx.conv(x, &format!("{prefix}.depth"), 1, 0)?;
    let alpha = ctx.graph.softmax(logits, 1)?;
    let context = ctx.conv(x, &format!("{prefix}.context"), 1, 0)?;
    Ok(LiftOutput { alpha, context })
}

/// Context features only, `[M, C, Hf, Wf]`.
pub fn encode_context<T: Float>(ctx: &mut Ctx<'_, T>, images: Var, cfg: &EncoderConfig, prefix: &str) -> Result<Var> {
    let x = trunk(ctx, images, cfg, prefix)?;
    Ok(ctx.conv(x, &format!("{prefix}.context"), 1, 0)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LiftMode {
    Learned,
    /// Every depth bin gets `1/|D|`.
    Uniform,
    /// One-hot at the bin nearest the true depth; carries no gradient.
    Oracle,
}

impl std::str::FromStr for LiftMode {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(LiftMode::Learned),
            "uniform" => Ok(LiftMode::Uniform),
            "oracle" => Ok(LiftMode::Oracle),
            other => Err(CoreError::Config(format!("unknown lift mode `{other}` (learned, uniform, oracle)"))),
        }
    }
}

/// Replaces `alpha` according to `mode`. `true_depth` is `[M, H, W]` metres
/// and is required for the oracle. `H` and `W` must be whole multiples of the
/// feature size; each feature pixel then gets the mean of the one-hot codes of
/// the image pixels it covers, which is a plain one-hot when the depth map is
/// already at feature resolution.
pub fn lift_mode_override<T: Float>(
    g: &mut Graph<T>,
    lo: LiftOutput,
    mode: LiftMode,
    bins: &DepthBinSpec,
    true_depth: Option<&Tensor<f32>>,
) -> Result<LiftOutput> {
    let shape = g.shape(lo.alpha).to_vec();
    let (m, d, hf, wf) = (shape[0], shape[1], shape[2], shape[3]);
    let alpha = match mode {
        LiftMode::Learned => return Ok(lo),
        LiftMode::Uniform => g.constant(Tensor::full(shape, T::of(1.0 / d as f64))),
        LiftMode::Oracle => {
            let depth = true_depth.ok_or_else(|| CoreError::Config("oracle lift mode needs ground-truth depth maps".into()))?;
            let ds = match depth.shape() {
                &[dm, h, w] if dm == m && h % hf == 0 && w % wf == 0 && h / hf == w / wf && h > 0 => h / hf,
                _ => {
                    return Err(CoreError::Shape {
                        op: "lift_mode_override",
                        msg: format!("depth {:?} for alpha {:?}", depth.shape(), shape),
                    })
                }
            };
            let (w, plane) = (wf * ds, hf * wf);
            let share = T::of(1.0 / (ds * ds) as f64);
            let mut a = vec![T::zero(); m * d * plane];
            for (idx, &z) in depth.data().iter().enumerate() {
                let (mi, r, c) = (idx / (plane * ds * ds), idx / w % (hf * ds), idx % w);
                let p = r / ds * wf + c / ds;
                a[(mi * d + bins.nearest(z as f64)) * plane + p] += share;
            }
            g.constant(Tensor::from_vec(shape, a)?)
        }
    };
    Ok(LiftOutput { alpha, ..lo })
}

/// `features[m, d, h, w, :] = alpha[m, d, h, w] · context[m, :, h, w]`.
pub fn lift_features<T: Float>(g: &mut Graph<T>, lo: LiftOutput) -> Result<Var> {
    Ok(g.outer_mul(lo.alpha, lo.context)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(zero: bool) -> (ParamStore<f64>, EncoderConfig) {
        let cfg = EncoderConfig {
            widths: vec![4, 4],
            depth_bins: 5,
            context: 3,
        };
        let mut store = ParamStore::new();
        init_encoder(&mut store, "enc", &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        if zero {
            for name in ["enc.depth.w", "enc.context.w"] {
                store.value_mut(name).unwrap().data_mut().fill(0.0);
            }
        }
        (store, cfg)
    }

    #[test]
    fn zero_heads_give_uniform_alpha_at_feature_stride() {
        let (store, cfg) = setup(true);
        let mut ctx = Ctx::new(&store, true);
        let img = ctx
            .graph
            .constant(Tensor::uniform([2, 3, 8, 12], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2)));
        let lo = encode(&mut ctx, img, &cfg, "enc").unwrap();
        let a = ctx.graph.value(lo.alpha);
        assert_eq!(a.shape(), &[2, 5, 2, 3]);
        assert!(a.data().iter().all(|&v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn scalar_outer_product() {
        let mut g = Graph::<f32>::new();
        let alpha = g.constant(Tensor::from_vec([1, 2, 1, 1], vec![0.25, 0.75]).unwrap());
        let context = g.constant(Tensor::from_vec([1, 1, 1, 1], vec![3.0]).unwrap());
        let f = lift_features(&mut g, LiftOutput { alpha, context }).unwrap();
        assert_eq!(g.value(f).data(), &[0.75, 2.25]);
    }

    #[test]
    fn oracle_and_uniform_overrides() {
        let bins = DepthBinSpec::new(4.0, 1.0, 10).unwrap();
        let mut g = Graph::<f32>::new();
        let alpha = g.constant(Tensor::zeros([1, 10, 1, 3]));
        let context = g.constant(Tensor::ones([1, 2, 1, 3]));
        let lo = LiftOutput { alpha, context };
        let depth = Tensor::from_vec([1, 1, 3], vec![11.0, 100.0, f32::INFINITY]).unwrap();
        let o = lift_mode_override(&mut g, lo, LiftMode::Oracle, &bins, Some(&depth)).unwrap();
        let a = g.value(o.alpha).data().to_vec();
        let hot: Vec<usize> = (0..3).map(|p| (0..10).find(|&d| a[d * 3 + p] == 1.0).unwrap()).collect();
        assert_eq!(hot, vec![7, 9, 9]);
        assert_eq!(a.iter().filter(|&&v| v != 0.0).count(), 3);

        let u = lift_mode_override(&mut g, lo, LiftMode::Uniform, &bins, None).unwrap();
        assert!(g.value(u.alpha).data().iter().all(|&v| v == 0.1));
        assert!(lift_mode_override(&mut g, lo, LiftMode::Oracle, &bins, None).is_err());
    }
}
