use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::scalar::Float;
use crate::tensor::Tensor;

/// Weighted taps for [`Graph::sparse_weighted_sum`]: output `k` reads
/// `Σ w · x[idx]` over `taps[k]`.
pub type Taps = Arc<Vec<Vec<(u32, f64)>>>;

fn rows_of<T: Float>(g: &Graph<T>, op: &'static str, x: Var) -> Result<(usize, usize)> {
    let s = g.shape(x);
    if s.len() != 2 {
        return Err(TensorError::invalid(op, format!("expects a [N, C] matrix, got {:?}", s)));
    }
    Ok((s[0], s[1]))
}

impl<T: Float> Graph<T> {
    /// `out[i, :] = x[index[i], :]`.
    pub fn gather_rows(&mut self, x: Var, index: Arc<Vec<u32>>) -> Result<Var> {
        let (n, c) = rows_of(self, "gather_rows", x)?;
        if let Some(&bad) = index.iter().find(|&&i| i as usize >= n) {
            return Err(TensorError::invalid("gather_rows", format!("row {} out of range {}", bad, n)));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            out.extend_from_slice(&xv[i as usize * c..(i as usize + 1) * c]);
        }
        let out = Tensor::from_vec([index.len(), c], out)?;
        self.record("gather_rows", &[x], out, move |args| {
            let g = args.grad.data();
            let mut gx = vec![T::zero(); n * c];
            for (r, &i) in index.iter().enumerate() {
                for (d, &v) in gx[i as usize * c..(i as usize + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                    *d += v;
                }
            }
            Ok(vec![Some(Tensor::from_vec([n, c], gx)?)])
        })
    }

    /// `out[index[i], :] += x[i, :]` into `rows` zero-initialised rows.
    pub fn scatter_rows(&mut self, x: Var, index: Arc<Vec<u32>>, rows: usize) -> Result<Var> {
        let (m, c) = rows_of(self, "scatter_rows", x)?;
        if index.len() != m {
            return Err(TensorError::invalid(
                "scatter_rows",
                format!("{} indices for {} rows", index.len(), m),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i as usize >= rows) {
            return Err(TensorError::invalid("scatter_rows", format!("row {} out of range {}", bad, rows)));
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); rows * c];
        for (r, &i) in index.iter().enumerate() {
            for (d, &v) in out[i as usize * c..(i as usize + 1) * c].iter_mut().zip(&xv[r * c..(r + 1) * c]) {
                *d += v;
            }
        }
        let out = Tensor::from_vec([rows, c], out)?;
        self.record("scatter_rows", &[x], out, move |args| {
            let g = args.grad.data();
            let mut gx = Vec::with_capacity(m * c);
            for &i in index.iter() {
                gx.extend_from_slice(&g[i as usize * c..(i as usize + 1) * c]);
            }
            Ok(vec![Some(Tensor::from_vec([m, c], gx)?)])
        })
    }

    /// For `x[B, ...]` viewed as `[B, M]`, returns `out[B, K]` with
    /// `out[b, k] = Σ_{(i, w) ∈ taps[k]} w · x[b, i]`.
    pub fn sparse_weighted_sum(&mut self, x: Var, taps: Taps) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(TensorError::invalid("sparse_weighted_sum", "needs a batch axis"));
        }
        let b = shape[0];
        let m: usize = shape[1..].iter().product();
        if let Some(bad) = taps.iter().flatten().find(|(i, _)| *i as usize >= m) {
            return Err(TensorError::invalid(
                "sparse_weighted_sum",
                format!("index {} out of range {}", bad.0, m),
            ));
        }
        let k = taps.len();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * k];
        for bi in 0..b {
            let row = &xv[bi * m..(bi + 1) * m];
            for (ki, t) in taps.iter().enumerate() {
                out[bi * k + ki] = t.iter().map(|&(i, w)| T::of(w) * row[i as usize]).sum();
            }
        }
        let out = Tensor::from_vec([b, k], out)?;
        self.record("sparse_weighted_sum", &[x], out, move |args| {
            let g = args.grad.data();
            let mut gx = vec![T::zero(); b * m];
            for bi in 0..b {
                for (ki, t) in taps.iter().enumerate() {
                    let gv = g[bi * k + ki];
                    for &(i, w) in t {
                        gx[bi * m + i as usize] += T::of(w) * gv;
                    }
                }
            }
            Ok(vec![Some(Tensor::from_vec(shape.clone(), gx)?)])
        })
    }
}
