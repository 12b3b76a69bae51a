//! Pinhole cameras, rigs, depth bins and frustum point clouds.
//!
//! Ego frame: x forward, y left, z up. Camera frame: x right, y down,
//! z forward along the optical axis. Depth is the camera-frame z.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CoreError, Result};

pub type Vec3 = [f64; 3];
/// Row-major 3×3 matrix.
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// `mᵀ v`.
pub fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Rotation about the ego z axis by `quarter_turns` × 90°, built from exact
/// 0/±1 entries so applying it introduces no rounding.
pub fn rot_z_quarter(quarter_turns: usize) -> Mat3 {
    let (c, s) = match quarter_turns % 4 {
        0 => (1.0, 0.0),
        1 => (0.0, 1.0),
        2 => (-1.0, 0.0),
        _ => (0.0, -1.0),
    };
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Rodrigues rotation about a unit `axis` by `angle` radians.
pub fn axis_angle(axis: Vec3, angle: f64) -> Mat3 {
    let [x, y, z] = axis;
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite() && cx.is_finite() && cy.is_finite()) {
            return Err(CoreError::Camera(format!("focal lengths must be positive, got fx={fx} fy={fy}")));
        }
        Ok(Intrinsics { fx, fy, cx, cy })
    }
}

/// Camera-to-ego rigid transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Extrinsics {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Extrinsics {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let rtr = mat_mul(&transpose(&rotation), &rotation);
        let ortho_err = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .map(|(i, j)| (rtr[i][j] - IDENTITY[i][j]).abs())
            .fold(0.0, f64::max);
        let d = det(&rotation);
        if ortho_err > 1e-6 || (d - 1.0).abs() > 1e-6 || translation.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Camera(format!(
                "rotation must be orthonormal with det +1 (orthogonality error {ortho_err:.2e}, det {d})"
            )));
        }
        Ok(Extrinsics { rotation, translation })
    }

    pub fn identity() -> Self {
        Extrinsics {
            rotation: IDENTITY,
            translation: [0.0; 3],
        }
    }

    /// A camera at `position` looking along ego yaw `yaw` (radians from +x
    /// towards +y), pitched down by `pitch` radians, with no roll.
    pub fn looking(yaw: f64, pitch: f64, position: Vec3) -> Self {
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let right = [sy, -cy, 0.0];
        let forward = [cy * cp, sy * cp, -sp];
        let down = cross(forward, right);
        let rotation = [
            [right[0], down[0], forward[0]],
            [right[1], down[1], forward[1]],
            [right[2], down[2], forward[2]],
        ];
        Extrinsics {
            rotation,
            translation: position,
        }
    }

    pub fn cam_to_ego(&self, p: Vec3) -> Vec3 {
        let r = mat_vec(&self.rotation, p);
        [r[0] + self.translation[0], r[1] + self.translation[1], r[2] + self.translation[2]]
    }

    pub fn ego_to_cam(&self, p: Vec3) -> Vec3 {
        let q = [p[0] - self.translation[0], p[1] - self.translation[1], p[2] - self.translation[2]];
        mat_t_vec(&self.rotation, q)
    }

    /// Composes an ego-frame rigid motion `(r, t)` after this transform.
    pub fn transformed(&self, r: &Mat3, t: Vec3) -> Self {
        let tr = mat_vec(r, self.translation);
        Extrinsics {
            rotation: mat_mul(r, &self.rotation),
            translation: [tr[0] + t[0], tr[1] + t[1], tr[2] + t[2]],
        }
    }
}

fn transpose(m: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            t[j][i] = v;
        }
    }
    t
}

/// Ego coordinates of the point at continuous pixel `(h, w)` and depth `d`.
pub fn unproject_pixel(intr: &Intrinsics, extr: &Extrinsics, h: f64, w: f64, d: f64) -> Result<Vec3> {
    if !(d > 0.0) {
        return Err(CoreError::Camera(format!("depth must be positive, got {d}")));
    }
    let cam = [(w - intr.cx) * d / intr.fx, (h - intr.cy) * d / intr.fy, d];
    Ok(extr.cam_to_ego(cam))
}

/// `(h, w, d)` of an ego point, or `None` if it is not in front of the camera.
pub fn project_point(intr: &Intrinsics, extr: &Extrinsics, p: Vec3) -> Option<(f64, f64, f64)> {
    let c = extr.ego_to_cam(p);
    if c[2] <= 0.0 {
        return None;
    }
    Some((intr.fy * c[1] / c[2] + intr.cy, intr.fx * c[0] / c[2] + intr.cx, c[2]))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub extrinsics: Extrinsics,
    pub height: usize,
    pub width: usize,
}

impl Camera {
    /// Camera-frame direction through continuous pixel `(h, w)`, scaled so
    /// its z component is 1.
    pub fn ray(&self, h: f64, w: f64) -> Vec3 {
        let i = &self.intrinsics;
        [(w - i.cx) / i.fx, (h - i.cy) / i.fy, 1.0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraRig {
    cameras: Vec<Camera>,
}

impl CameraRig {
    pub fn new(cameras: Vec<Camera>) -> Result<Self> {
        let first = cameras.first().ok_or_else(|| CoreError::Camera("a rig needs at least one camera".into()))?;
        if let Some((i, c)) = cameras
            .iter()
            .enumerate()
            .find(|(_, c)| (c.height, c.width) != (first.height, first.width))
        {
            return Err(CoreError::Camera(format!(
                "camera {i} is {}×{}, camera 0 is {}×{}",
                c.height, c.width, first.height, first.width
            )));
        }
        Ok(CameraRig { cameras })
    }

    /// Cameras spread around the ego vehicle at the given yaws (degrees),
    /// all at `mount_height` metres with a shared horizontal field of view.
    pub fn ring(yaws_deg: &[f64], height: usize, width: usize, hfov_deg: f64, mount_height: f64, pitch_deg: f64) -> Result<Self> {
        let fx = (width as f64 / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
        let intr = Intrinsics::new(fx, fx, width as f64 / 2.0, height as f64 / 2.0)?;
        let cams = yaws_deg
            .iter()
            .map(|&yaw| {
                let yaw = yaw.to_radians();
                // Mount points sit slightly out from the ego centre along each view direction.
                let pos = [0.5 * yaw.cos(), 0.5 * yaw.sin(), mount_height];
                Camera {
                    intrinsics: intr,
                    extrinsics: Extrinsics::looking(yaw, pitch_deg.to_radians(), pos),
                    height,
                    width,
                }
            })
            .collect();
        CameraRig::new(cams)
    }

    /// Front, left, right and back cameras.
    pub fn toy4(height: usize, width: usize, hfov_deg: f64) -> Result<Self> {
        CameraRig::ring(&[0.0, 90.0, -90.0, 180.0], height, width, hfov_deg, 1.6, 0.0)
    }

    /// Six cameras at 60° spacing.
    pub fn toy6(height: usize, width: usize, hfov_deg: f64) -> Result<Self> {
        CameraRig::ring(&[0.0, 60.0, -60.0, 120.0, -120.0, 180.0], height, width, hfov_deg, 1.6, 0.0)
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.cameras[0].height, self.cameras[0].width)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let cams = indices
            .iter()
            .map(|&i| {
                self.cameras
                    .get(i)
                    .copied()
                    .ok_or_else(|| CoreError::Camera(format!("camera {i} not in a rig of {}", self.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        CameraRig::new(cams)
    }

    /// Applies an ego-frame rigid motion to every camera.
    pub fn transformed(&self, r: &Mat3, t: Vec3) -> Self {
        CameraRig {
            cameras: self
                .cameras
                .iter()
                .map(|c| Camera {
                    extrinsics: c.extrinsics.transformed(r, t),
                    ..*c
                })
                .collect(),
        }
    }

    pub fn to_calibration_text(&self) -> String {
        let mut s = String::new();
        for (k, c) in self.cameras.iter().enumerate() {
            let i = &c.intrinsics;
            let r = &c.extrinsics.rotation;
            let t = &c.extrinsics.translation;
            let _ = writeln!(s, "camera {k}");
            let _ = writeln!(s, "intrinsics {} {} {} {}", i.fx, i.fy, i.cx, i.cy);
            let _ = writeln!(
                s,
                "rotation {} {} {} {} {} {} {} {} {}",
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2]
            );
            let _ = writeln!(s, "translation {} {} {}", t[0], t[1], t[2]);
            let _ = writeln!(s, "image {} {}", c.height, c.width);
        }
        s
    }

    pub fn from_calibration_text(text: &str) -> Result<Self> {
        #[derive(Default)]
        struct Partial {
            intr: Option<Intrinsics>,
            rot: Option<Mat3>,
            trans: Option<Vec3>,
            image: Option<(usize, usize)>,
        }
        let mut blocks: Vec<(usize, Partial)> = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = ln + 1;
            let err = |msg: String| CoreError::Calibration { line, msg };
            let mut it = raw.split_whitespace();
            let Some(key) = it.next() else { continue };
            let nums: Vec<&str> = it.collect();
            let floats = |n: usize| -> Result<Vec<f64>> {
                if nums.len() != n {
                    return Err(err(format!("`{key}` expects {n} values, got {}", nums.len())));
                }
                nums.iter()
                    .map(|v| v.parse::<f64>().map_err(|_| err(format!("bad number `{v}`"))))
                    .collect()
            };
            if key == "camera" {
                let idx = floats(1)?[0] as usize;
                if idx != blocks.len() {
                    return Err(err(format!("expected camera {}, found camera {idx}", blocks.len())));
                }
                blocks.push((line, Partial::default()));
                continue;
            }
            let Some((_, cur)) = blocks.last_mut() else {
                return Err(err(format!("`{key}` before any `camera` line")));
            };
            match key {
                "intrinsics" => {
                    let v = floats(4)?;
                    cur.intr = Some(Intrinsics::new(v[0], v[1], v[2], v[3]).map_err(|e| err(e.to_string()))?);
                }
                "rotation" => {
                    let v = floats(9)?;
                    cur.rot = Some([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]]);
                }
                "translation" => {
                    let v = floats(3)?;
                    cur.trans = Some([v[0], v[1], v[2]]);
                }
                "image" => {
                    let v = floats(2)?;
                    cur.image = Some((v[0] as usize, v[1] as usize));
                }
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        let cams = blocks
            .into_iter()
            .enumerate()
            .map(|(k, (line, p))| {
                let missing = |f: &str| CoreError::Calibration {
                    line,
                    msg: format!("camera {k} is missing `{f}`"),
                };
                let (h, w) = p.image.ok_or_else(|| missing("image"))?;
                let extr = Extrinsics::new(p.rot.ok_or_else(|| missing("rotation"))?, p.trans.ok_or_else(|| missing("translation"))?)
                    .map_err(|e| CoreError::Calibration {
                        line,
                        msg: format!("camera {k}: {e}"),
                    })?;
                Ok(Camera {
                    intrinsics: p.intr.ok_or_else(|| missing("intrinsics"))?,
                    extrinsics: extr,
                    height: h,
                    width: w,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        CameraRig::new(cams)
    }
}

/// Point-sampled depths `d0 + i·delta` for `i` in `0..count`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthBinSpec {
    pub d0: f64,
    pub delta: f64,
    pub count: usize,
}

impl DepthBinSpec {
    pub fn new(d0: f64, delta: f64, count: usize) -> Result<Self> {
        if !(d0 > 0.0 && delta > 0.0 && count >= 1) {
            return Err(CoreError::Config(format!("depth bins need d0 > 0, delta > 0, count ≥ 1 (got {d0}, {delta}, {count})")));
        }
        Ok(DepthBinSpec { d0, delta, count })
    }

    pub fn depth(&self, i: usize) -> f64 {
        self.d0 + i as f64 * self.delta
    }

    /// Index of the bin closest to `d`, clamped to the first and last bin.
    /// Infinite depth maps to the last bin.
    pub fn nearest(&self, d: f64) -> usize {
        if d.is_nan() {
            return self.count - 1;
        }
        let x = ((d - self.d0) / self.delta).round();
        x.clamp(0.0, (self.count - 1) as f64) as usize
    }
}

/// Ego coordinates of every (depth bin, feature row, feature column) point
/// of one camera, in that order.
#[derive(Clone, Debug, PartialEq)]
pub struct FrustumGrid {
    pub bins: DepthBinSpec,
    pub downsample: usize,
    pub hf: usize,
    pub wf: usize,
    pub coords: Vec<Vec3>,
}

impl FrustumGrid {
    pub fn new(camera: &Camera, bins: DepthBinSpec, downsample: usize) -> Result<Self> {
        if downsample == 0 || camera.height % downsample != 0 || camera.width % downsample != 0 {
            return Err(CoreError::Config(format!(
                "image {}×{} is not divisible by downsample {downsample}",
                camera.height, camera.width
            )));
        }
        let (hf, wf) = (camera.height / downsample, camera.width / downsample);
        let s = downsample as f64;
        let mut coords = Vec::with_capacity(bins.count * hf * wf);
        for d in 0..bins.count {
            let depth = bins.depth(d);
            for i in 0..hf {
                for j in 0..wf {
                    let h = (i as f64 + 0.5) * s;
                    let w = (j as f64 + 0.5) * s;
                    coords.push(unproject_pixel(&camera.intrinsics, &camera.extrinsics, h, w, depth)?);
                }
            }
        }
        Ok(FrustumGrid {
            bins,
            downsample,
            hf,
            wf,
            coords,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// The continuous pixel and depth that generated point `index`.
    pub fn source(&self, index: usize) -> (f64, f64, f64) {
        let j = index % self.wf;
        let i = (index / self.wf) % self.hf;
        let d = index / (self.wf * self.hf);
        let s = self.downsample as f64;
        ((i as f64 + 0.5) * s, (j as f64 + 0.5) * s, self.bins.depth(d))
    }
}

pub fn build_frustum(rig: &CameraRig, bins: DepthBinSpec, downsample: usize) -> Result<Vec<FrustumGrid>> {
    rig.cameras().iter().map(|c| FrustumGrid::new(c, bins, downsample)).collect()
}

/// Rotates by a random axis-angle of angle `~ N(0, rot_noise_deg)` (applied in
/// the ego frame) and shifts by `~ N(0, trans_noise_m)` per axis.
pub fn perturb_extrinsics(extr: &Extrinsics, rot_noise_deg: f64, trans_noise_m: f64, seed: u64) -> Extrinsics {
    if rot_noise_deg == 0.0 && trans_noise_m == 0.0 {
        return *extr;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let axis = loop {
        let a = [normal(), normal(), normal()];
        let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
        if n > 1e-9 {
            break [a[0] / n, a[1] / n, a[2] / n];
        }
    };
    let angle = normal() * rot_noise_deg.to_radians();
    let dt = [normal() * trans_noise_m, normal() * trans_noise_m, normal() * trans_noise_m];
    let r = orthonormalize(&mat_mul(&axis_angle(axis, angle), &extr.rotation));
    let t = extr.translation;
    Extrinsics {
        rotation: r,
        translation: [t[0] + dt[0], t[1] + dt[1], t[2] + dt[2]],
    }
}

/// Gram-Schmidt on the columns, keeping the result right-handed.
fn orthonormalize(m: &Mat3) -> Mat3 {
    let col = |j: usize| [m[0][j], m[1][j], m[2][j]];
    let norm = |v: Vec3| {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    };
    let a = norm(col(0));
    let b = col(1);
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let b = norm([b[0] - dot * a[0], b[1] - dot * a[1], b[2] - dot * a[2]]);
    let c = cross(a, b);
    [[a[0], b[0], c[0]], [a[1], b[1], c[1]], [a[2], b[2], c[2]]]
}
