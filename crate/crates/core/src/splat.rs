//! Pillar binning and sum pooling of frustum features into a BEV grid.
//!
//! Pooled grids are `[B, C, X, Y]`: `X` runs along ego x (forward), `Y`
//! along ego y (left). A point's bin id is `b·X·Y + ix·Y + iy`.

use std::sync::Arc;

use lss_tensor::{register_custom_op, Float, Graph, Saved, Tensor, Var};

use crate::camera::Vec3;
use crate::error::{CoreError, Result};

pub const SENTINEL: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BevGridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub cell: f64,
    /// Optional `[lo, hi)` height window; `None` keeps every point.
    pub z_clip: Option<(f64, f64)>,
}

impl BevGridSpec {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64, cell: f64) -> Result<Self> {
        let spec = BevGridSpec {
            x_min,
            x_max,
            y_min,
            y_max,
            cell,
            z_clip: None,
        };
        for (lo, hi, axis) in [(x_min, x_max, "x"), (y_min, y_max, "y")] {
            let n = (hi - lo) / cell;
            if !(cell > 0.0 && n >= 0.5 && (n - n.round()).abs() < 1e-6) {
                return Err(CoreError::Config(format!(
                    "grid {axis} extent [{lo}, {hi}) is not a positive multiple of cell {cell}"
                )));
            }
        }
        Ok(spec)
    }

    /// A square grid `[-half, half)²`.
    pub fn square(half: f64, cell: f64) -> Result<Self> {
        BevGridSpec::new(-half, half, -half, half, cell)
    }

    pub fn nx(&self) -> usize {
        ((self.x_max - self.x_min) / self.cell).round() as usize
    }

    pub fn ny(&self) -> usize {
        ((self.y_max - self.y_min) / self.cell).round() as usize
    }

    pub fn cells(&self) -> usize {
        self.nx() * self.ny()
    }

    /// `(ix, iy)` of the pillar containing `(x, y)`, if inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fx = ((x - self.x_min) / self.cell).floor();
        let fy = ((y - self.y_min) / self.cell).floor();
        if fx < 0.0 || fy < 0.0 || fx >= self.nx() as f64 || fy >= self.ny() as f64 {
            return None;
        }
        Some((fx as usize, fy as usize))
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.x_min + (ix as f64 + 0.5) * self.cell,
            self.y_min + (iy as f64 + 0.5) * self.cell,
        )
    }
}

/// Pillar ids for a point cloud, plus the stable sort the pooling kernel
/// walks.
#[derive(Clone, Debug)]
pub struct BinAssignment {
    /// Per point: its bin id, or [`SENTINEL`].
    pub bins: Vec<u32>,
    /// In-grid point indices sorted by (bin id, original index).
    pub order: Vec<u32>,
    /// Per non-empty bin in ascending order: `(bin id, end)` where `end` is
    /// the exclusive end of its run in `order`.
    pub segments: Vec<(u32, u32)>,
    /// Total bins, `B·X·Y`.
    pub cells: usize,
}

impl BinAssignment {
    /// Counting sort over bin ids; stable, so ties keep original order.
    pub fn from_bins(bins: Vec<u32>, cells: usize) -> Result<Self> {
        if let Some(&bad) = bins.iter().find(|&&b| b != SENTINEL && b as usize >= cells) {
            return Err(CoreError::BinOutOfRange { bin: bad, cells });
        }
        let mut counts = vec![0u32; cells + 1];
        for &b in &bins {
            if b != SENTINEL {
                counts[b as usize + 1] += 1;
            }
        }
        for i in 0..cells {
            counts[i + 1] += counts[i];
        }
        let valid = counts[cells] as usize;
        let mut next = counts.clone();
        let mut order = vec![0u32; valid];
        for (i, &b) in bins.iter().enumerate() {
            if b != SENTINEL {
                let slot = &mut next[b as usize];
                order[*slot as usize] = i as u32;
                *slot += 1;
            }
        }
        let segments = (0..cells)
            .filter(|&c| counts[c + 1] > counts[c])
            .map(|c| (c as u32, counts[c + 1]))
            .collect();
        Ok(BinAssignment {
            bins,
            order,
            segments,
            cells,
        })
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn valid(&self) -> usize {
        self.order.len()
    }
}

/// Assigns each point to its pillar. `sample[i]` is the batch index of
/// point `i`; heights are ignored unless the spec carries a z-clip.
pub fn assign_bins(coords: &[Vec3], sample: &[u32], spec: &BevGridSpec, batch: usize) -> Result<BinAssignment> {
    if coords.len() != sample.len() {
        return Err(CoreError::Shape {
            op: "assign_bins",
            msg: format!("{} points but {} sample indices", coords.len(), sample.len()),
        });
    }
    let per = spec.cells();
    let mut bins = Vec::with_capacity(coords.len());
    for (i, (p, &b)) in coords.iter().zip(sample).enumerate() {
        if !p.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFiniteCoord(i));
        }
        if b as usize >= batch {
            return Err(CoreError::Shape {
                op: "assign_bins",
                msg: format!("point {i} belongs to sample {b} of a batch of {batch}"),
            });
        }
        let in_z = spec.z_clip.is_none_or(|(lo, hi)| p[2] >= lo && p[2] < hi);
        bins.push(match spec.cell_of(p[0], p[1]) {
            Some((ix, iy)) if in_z => (b as usize * per + ix * spec.ny() + iy) as u32,
            _ => SENTINEL,
        });
    }
    BinAssignment::from_bins(bins, batch * per)
}

fn check_features(features: &[usize], assign: &BinAssignment) -> Result<usize> {
    if features.len() != 2 || features[0] != assign.len() {
        return Err(CoreError::Shape {
            op: "frustum_pool",
            msg: format!("features {:?} for {} binned points", features, assign.len()),
        });
    }
    Ok(features[1])
}

fn grid_shape(spec: &BevGridSpec, batch: usize, c: usize) -> [usize; 4] {
    [batch, c, spec.nx(), spec.ny()]
}

/// Sum pooling by the cumulative-sum trick.
///
/// Points are visited in sorted order while a running prefix sum is kept;
/// at the end of each bin's run, the bin receives the prefix sum minus the
/// prefix sum at the previous boundary. Accumulation is in f64, so results
/// are independent of how many points share a bin to within f32 rounding.
pub fn pool_forward<T: Float>(features: &Tensor<T>, assign: &BinAssignment, spec: &BevGridSpec, batch: usize) -> Result<Tensor<T>> {
    let c = check_features(features.shape(), assign)?;
    if assign.cells != batch * spec.cells() {
        return Err(CoreError::Shape {
            op: "frustum_pool",
            msg: format!("assignment has {} cells, grid needs {}", assign.cells, batch * spec.cells()),
        });
    }
    let per = spec.cells();
    let f = features.data();
    let mut out = vec![T::zero(); batch * c * per];
    let mut cum = vec![0f64; c];
    let mut boundary = vec![0f64; c];
    let mut k = 0usize;
    for &(bin, end) in &assign.segments {
        while k < end as usize {
            let p = assign.order[k] as usize;
            for (acc, &v) in cum.iter_mut().zip(&f[p * c..(p + 1) * c]) {
                *acc += v.as_f64();
            }
            k += 1;
        }
        let (b, cell) = (bin as usize / per, bin as usize % per);
        for ch in 0..c {
            out[(b * c + ch) * per + cell] = T::of(cum[ch] - boundary[ch]);
        }
        boundary.copy_from_slice(&cum);
    }
    Ok(Tensor::from_vec(grid_shape(spec, batch, c), out)?)
}

/// `grad_point[i] = grad_out[bin(i)]`; out-of-grid points get zero.
pub fn pool_backward<T: Float>(grad_out: &Tensor<T>, assign: &BinAssignment, spec: &BevGridSpec, c: usize) -> Result<Tensor<T>> {
    let per = spec.cells();
    let g = grad_out.data();
    let mut gf = vec![T::zero(); assign.len() * c];
    for (i, &bin) in assign.bins.iter().enumerate() {
        if bin == SENTINEL {
            continue;
        }
        let (b, cell) = (bin as usize / per, bin as usize % per);
        for ch in 0..c {
            gf[i * c + ch] = g[(b * c + ch) * per + cell];
        }
    }
    Ok(Tensor::from_vec([assign.len(), c], gf)?)
}

/// Differentiable sum pooling `[P, C] → [B, C, X, Y]` with the analytic
/// backward above, recorded as a custom op.
pub fn frustum_pool<T: Float>(g: &mut Graph<T>, features: Var, assign: &Arc<BinAssignment>, spec: &BevGridSpec, batch: usize) -> Result<Var> {
    check_features(g.shape(features), assign)?;
    let (fa, ba) = (Arc::clone(assign), Arc::clone(assign));
    let (fs, bs) = (*spec, *spec);
    let op = register_custom_op(
        "frustum_pool",
        move |xs: &[&Tensor<T>]| {
            let out = pool_forward(xs[0], &fa, &fs, batch).map_err(to_tensor_err)?;
            Ok((out, Box::new(()) as Saved))
        },
        move |grad: &Tensor<T>, _: &Saved, xs: &[&Tensor<T>]| {
            let c = xs[0].shape()[1];
            Ok(vec![Some(pool_backward(grad, &ba, &bs, c).map_err(to_tensor_err)?)])
        },
    );
    Ok(g.apply_custom(&op, &[features])?)
}

fn to_tensor_err(e: CoreError) -> lss_tensor::TensorError {
    match e {
        CoreError::Tensor(t) => t,
        other => lss_tensor::TensorError::InvalidArgument {
            op: "frustum_pool",
            msg: other.to_string(),
        },
    }
}

/// Naive per-point scatter-add, the oracle for [`pool_forward`].
pub fn frustum_pool_reference<T: Float>(features: &Tensor<T>, bins: &[u32], spec: &BevGridSpec, batch: usize) -> Result<Tensor<T>> {
    let s = features.shape();
    if s.len() != 2 || s[0] != bins.len() {
        return Err(CoreError::Shape {
            op: "frustum_pool_reference",
            msg: format!("features {:?} for {} bins", s, bins.len()),
        });
    }
    let (c, per) = (s[1], spec.cells());
    let mut acc = vec![0f64; batch * c * per];
    for (i, &bin) in bins.iter().enumerate() {
        if bin == SENTINEL {
            continue;
        }
        if bin as usize >= batch * per {
            return Err(CoreError::BinOutOfRange { bin, cells: batch * per });
        }
        let (b, cell) = (bin as usize / per, bin as usize % per);
        for ch in 0..c {
            acc[(b * c + ch) * per + cell] += features.data()[i * c + ch].as_f64();
        }
    }
    Ok(Tensor::from_vec(grid_shape(spec, batch, c), acc.into_iter().map(T::of).collect())?)
}

/// The same pooling written with built-in graph ops (gather, cumsum,
/// boundary gather, subtract, scatter). Its backward is whatever autodiff
/// derives through those ops; it exists as the baseline the analytic
/// kernel is timed against.
pub fn frustum_pool_composed<T: Float>(g: &mut Graph<T>, features: Var, assign: &BinAssignment, spec: &BevGridSpec, batch: usize) -> Result<Var> {
    let c = check_features(g.shape(features), assign)?;
    let sorted = g.gather_rows(features, Arc::new(assign.order.clone()))?;
    let zero = g.constant(Tensor::zeros([1, c]));
    let cum = g.cumsum(sorted, 0)?;
    let cum = g.concat(&[zero, cum], 0)?;
    // Row `end` of the padded cumsum is the prefix through the segment;
    // row `start` is the prefix before it.
    let ends: Vec<u32> = assign.segments.iter().map(|&(_, e)| e).collect();
    let starts: Vec<u32> = std::iter::once(0).chain(ends.iter().copied()).take(ends.len()).collect();
    let hi = g.gather_rows(cum, Arc::new(ends))?;
    let lo = g.gather_rows(cum, Arc::new(starts))?;
    let sums = g.sub(hi, lo)?;
    let ids: Vec<u32> = assign.segments.iter().map(|&(b, _)| b).collect();
    let dense = g.scatter_rows(sums, Arc::new(ids), assign.cells)?;
    let dense = g.reshape(dense, &[batch, spec.cells(), c])?;
    let dense = g.permute(dense, &[0, 2, 1])?;
    Ok(g.reshape(dense, &grid_shape(spec, batch, c))?)
}
