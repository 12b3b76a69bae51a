//! 2-D convolution via im2col and GEMM.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::scalar::Float;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn l(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one image `[cin, h, w]` into `cols[cin*kh*kw, ho*wo]`.
fn im2col<T: Float>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let l = g.l();
    for c in 0..g.cin {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * l;
                let dst = &mut cols[row..row + l];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into `img`.
fn col2im<T: Float>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let l = g.l();
    for c in 0..g.cin {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * l;
                let src = &cols[row..row + l];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Float> Graph<T> {
    /// Cross-correlation of `x[B, Cin, H, W]` with `kernel[Cout, Cin, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: xs.clone(),
            rhs: ks.clone(),
        };
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] || stride == 0 {
            return Err(mismatch());
        }
        let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
        if kh > h + 2 * pad || kw > w + 2 * pad || kh == 0 || kw == 0 {
            return Err(mismatch());
        }
        let geom = ConvGeom {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        let (k, l) = (geom.k(), geom.l());
        let xv = self.value(x).data();
        let kv = self.value(kernel).data();
        let mut out = vec![T::zero(); b * cout * l];
        let mut cols = vec![T::zero(); k * l];
        for n in 0..b {
            im2col(&xv[n * cin * h * w..(n + 1) * cin * h * w], &geom, &mut cols);
            T::gemm(
                cout,
                k,
                l,
                T::one(),
                kv,
                (k as isize, 1),
                &cols,
                (l as isize, 1),
                T::zero(),
                &mut out[n * cout * l..(n + 1) * cout * l],
                (l as isize, 1),
            );
        }
        let out = Tensor::from_vec([b, cout, geom.ho, geom.wo], out)?;
        self.record("conv2d", &[x, kernel], out, move |args| {
            let (xv, kv, g) = (args.inputs[0].data(), args.inputs[1].data(), args.grad.data());
            let mut gx = args.needs[0].then(|| vec![T::zero(); b * cin * h * w]);
            let mut gk = args.needs[1].then(|| vec![T::zero(); cout * k]);
            let mut cols = vec![T::zero(); k * l];
            let mut dcols = vec![T::zero(); k * l];
            for n in 0..b {
                let gn = &g[n * cout * l..(n + 1) * cout * l];
                if let Some(gk) = gk.as_mut() {
                    im2col(&xv[n * cin * h * w..(n + 1) * cin * h * w], &geom, &mut cols);
                    // gk += gn · colsᵀ
                    T::gemm(
                        cout,
                        l,
                        k,
                        T::one(),
                        gn,
                        (l as isize, 1),
                        &cols,
                        (1, l as isize),
                        T::one(),
                        gk,
                        (k as isize, 1),
                    );
                }
                if let Some(gx) = gx.as_mut() {
                    // dcols = kernelᵀ · gn
                    T::gemm(
                        k,
                        cout,
                        l,
                        T::one(),
                        kv,
                        (1, k as isize),
                        gn,
                        (l as isize, 1),
                        T::zero(),
                        &mut dcols,
                        (l as isize, 1),
                    );
                    col2im(&dcols, &geom, &mut gx[n * cin * h * w..(n + 1) * cin * h * w]);
                }
            }
            Ok(vec![
                gx.map(|d| Tensor::from_vec([b, cin, h, w], d)).transpose()?,
                gk.map(|d| Tensor::from_vec([cout, cin, kh, kw], d)).transpose()?,
            ])
        })
    }
}
