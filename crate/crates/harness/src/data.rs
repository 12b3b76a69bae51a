//! Choosing which cameras of a sample the model sees, and with what
//! extrinsics, then packing samples into batches.

use anyhow::{bail, Result};
use lss_core::bev_head::Task;
use lss_core::camera::{perturb_extrinsics, Camera, Extrinsics};
use lss_core::pipeline::{Batch, View};
use lss_core::synth::Sample;
use lss_tensor::Tensor;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Which cameras to remove from a sample's view set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Drop {
    None,
    /// This many, chosen uniformly per sample.
    Random(usize),
    /// One specific rig camera.
    Camera(usize),
}

/// The cameras of one sample that reach the model, each with the
/// extrinsics the model is given (possibly perturbed).
#[derive(Clone, Debug)]
pub struct SampleViews {
    pub index: usize,
    pub cameras: Vec<(usize, Extrinsics)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPolicy {
    pub cameras: Vec<usize>,
    pub drop: Drop,
    pub noise_rot: f64,
    pub noise_trans: f64,
}

impl ViewPolicy {
    pub fn all(cameras: Vec<usize>) -> Self {
        ViewPolicy {
            cameras,
            drop: Drop::None,
            noise_rot: 0.0,
            noise_trans: 0.0,
        }
    }

    /// Consumes randomness only for the augmentations that are switched on.
    pub fn choose<R: Rng + ?Sized>(&self, sample: &Sample, index: usize, rng: &mut R) -> Result<SampleViews> {
        let n = sample.rig.len();
        if let Some(&c) = self.cameras.iter().find(|&&c| c >= n) {
            bail!("camera {c} requested but sample {index} has a {n}-camera rig");
        }
        let mut cams = self.cameras.clone();
        match self.drop {
            Drop::None => {}
            Drop::Camera(c) => cams.retain(|&k| k != c),
            Drop::Random(k) => {
                let k = k.min(cams.len());
                if k > 0 {
                    let mut gone: Vec<usize> = index::sample(rng, cams.len(), k).into_vec();
                    gone.sort_unstable();
                    for g in gone.into_iter().rev() {
                        cams.remove(g);
                    }
                }
            }
        }
        let noisy = self.noise_rot != 0.0 || self.noise_trans != 0.0;
        let cameras = cams
            .into_iter()
            .map(|k| {
                let e = sample.rig.cameras()[k].extrinsics;
                let e = if noisy {
                    perturb_extrinsics(&e, self.noise_rot, self.noise_trans, rng.random())
                } else {
                    e
                };
                (k, e)
            })
            .collect();
        Ok(SampleViews { index, cameras })
    }

    /// A deterministic choice for evaluation: sample `index` always gets the
    /// same cameras and noise for a given `seed`.
    pub fn choose_eval(&self, sample: &Sample, index: usize, seed: u64) -> Result<SampleViews> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        self.choose(sample, index, &mut rng)
    }
}

pub fn make_batch<'a>(samples: &'a [Sample], plan: &[SampleViews]) -> Batch<'a> {
    let mut views = Vec::new();
    for (b, sv) in plan.iter().enumerate() {
        let s = &samples[sv.index];
        let (h, w) = s.rig.image_size();
        for &(k, extrinsics) in &sv.cameras {
            let cam = s.rig.cameras()[k];
            views.push(View {
                sample: b,
                slot: k,
                camera: Camera { extrinsics, ..cam },
                image: &s.images.data()[k * 3 * h * w..(k + 1) * 3 * h * w],
                depth: &s.depths.data()[k * h * w..(k + 1) * h * w],
            });
        }
    }
    Batch { size: plan.len(), views }
}

pub fn raster(sample: &Sample, task: Task) -> Result<&Tensor<f32>> {
    Ok(match task {
        Task::Vehicle => &sample.bev_vehicle,
        Task::Drivable => &sample.bev_drivable,
        Task::Lane => &sample.bev_lane,
        Task::Plan => bail!("the planning task has no segmentation raster"),
    })
}

/// `[B, 1, X, Y]` targets for a segmentation task.
pub fn targets(samples: &[Sample], plan: &[SampleViews], task: Task) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    let mut shape = [plan.len(), 1, 0, 0];
    for sv in plan {
        let r = raster(&samples[sv.index], task)?;
        shape[2] = r.shape()[0];
        shape[3] = r.shape()[1];
        data.extend_from_slice(r.data());
    }
    Ok(Tensor::from_vec(shape, data)?)
}
