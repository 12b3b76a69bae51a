use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::scalar::Float;
use crate::tensor::Tensor;

/// Linear interpolation taps for one axis, corner-aligned: output index `o`
/// samples input position `o * (n_in - 1) / (n_out - 1)`.
fn taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            let src = if n_out > 1 {
                o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
            } else {
                0.0
            };
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn spatial<T: Float>(g: &Graph<T>, op: &'static str, x: Var) -> Result<(usize, usize, usize)> {
    let s = g.shape(x);
    if s.len() != 4 || s[2] == 0 || s[3] == 0 {
        return Err(TensorError::invalid(op, format!("expects [B, C, H, W], got {:?}", s)));
    }
    Ok((s[0] * s[1], s[2], s[3]))
}

impl<T: Float> Graph<T> {
    /// Repeats every pixel of `x[B, C, H, W]` into a `factor×factor` block.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (planes, h, w) = spatial(self, "upsample_nearest", x)?;
        if factor == 0 {
            return Err(TensorError::invalid("upsample_nearest", "factor must be positive"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); planes * oh * ow];
        for p in 0..planes {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[(p * oh + oy) * ow + ox] = xv[(p * h + oy / factor) * w + ox / factor];
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape[2] = oh;
        shape[3] = ow;
        let out = Tensor::from_vec(shape, out)?;
        self.record("upsample_nearest", &[x], out, move |args| {
            let g = args.grad.data();
            let mut gx = vec![T::zero(); planes * h * w];
            for p in 0..planes {
                for oy in 0..oh {
                    for ox in 0..ow {
                        gx[(p * h + oy / factor) * w + ox / factor] += g[(p * oh + oy) * ow + ox];
                    }
                }
            }
            Ok(vec![Some(Tensor::from_vec(args.inputs[0].shape(), gx)?)])
        })
    }

    /// Bilinear resize of `x[B, C, H, W]` to `[B, C, out_h, out_w]` with
    /// corner-aligned sampling.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (planes, h, w) = spatial(self, "resize_bilinear", x)?;
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::invalid("resize_bilinear", "empty output size"));
        }
        let ty: Vec<(usize, usize, T)> = taps(h, out_h).into_iter().map(|(a, b, f)| (a, b, T::of(f))).collect();
        let tx: Vec<(usize, usize, T)> = taps(w, out_w).into_iter().map(|(a, b, f)| (a, b, T::of(f))).collect();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); planes * out_h * out_w];
        for p in 0..planes {
            let src = &xv[p * h * w..(p + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                    out[(p * out_h + oy) * out_w + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape[2] = out_h;
        shape[3] = out_w;
        let out = Tensor::from_vec(shape, out)?;
        self.record("resize_bilinear", &[x], out, move |args| {
            let g = args.grad.data();
            let mut gx = vec![T::zero(); planes * h * w];
            for p in 0..planes {
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let v = g[(p * out_h + oy) * out_w + ox];
                        let (top, bot) = (v * (T::one() - fy), v * fy);
                        dst[y0 * w + x0] += top * (T::one() - fx);
                        dst[y0 * w + x1] += top * fx;
                        dst[y1 * w + x0] += bot * (T::one() - fx);
                        dst[y1 * w + x1] += bot * fx;
                    }
                }
            }
            Ok(vec![Some(Tensor::from_vec(args.inputs[0].shape(), gx)?)])
        })
    }
}
