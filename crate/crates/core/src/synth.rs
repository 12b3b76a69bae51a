//! A deterministic synthetic driving world: one curved lane on a flat
//! ground plane, box-shaped vehicles, a ray-cast multi-camera renderer,
//! BEV rasters and expert trajectories.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use lss_tensor::params::{read_tensor, write_tensor};
use lss_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::camera::{CameraRig, Vec3};
use crate::error::{CoreError, Result};
use crate::shoot::Trajectory;
use crate::splat::BevGridSpec;

pub const EGO_LENGTH: f64 = 4.5;
pub const EGO_WIDTH: f64 = 1.9;
/// Vehicles this close to the lane centre and this far ahead stop the expert.
pub const BLOCKING_RANGE: f64 = 15.0;

const SKY: [f32; 3] = [0.55, 0.7, 0.9];
const ROAD: [f32; 3] = [0.33, 0.33, 0.36];
const GRASS: [f32; 3] = [0.25, 0.45, 0.2];
const MARKING: [f32; 3] = [0.92, 0.92, 0.85];
pub const PALETTE: [[f32; 3]; 6] = [
    [0.85, 0.1, 0.1],
    [0.1, 0.2, 0.85],
    [0.9, 0.8, 0.1],
    [0.1, 0.7, 0.7],
    [0.7, 0.2, 0.7],
    [0.95, 0.5, 0.1],
];

/// A lane centreline through the origin with heading +x and constant
/// curvature (positive turns left).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lane {
    pub curvature: f64,
    pub width: f64,
    pub marking_width: f64,
}

impl Lane {
    /// Centreline position and heading at arc length `s`.
    pub fn at(&self, s: f64) -> ([f64; 2], f64) {
        let k = self.curvature;
        if k.abs() < 1e-9 {
            return ([s, 0.0], 0.0);
        }
        let th = k * s;
        ([th.sin() / k, (1.0 - th.cos()) / k], th)
    }

    /// `(s, lateral)` of the nearest centreline point; lateral is positive
    /// to the left of the direction of travel.
    pub fn frenet(&self, x: f64, y: f64) -> (f64, f64) {
        let k = self.curvature;
        if k.abs() < 1e-9 {
            return (x, y);
        }
        let (ux, uy) = (k * x, k * y - 1.0);
        let s = ux.atan2(-uy) / k;
        (s, (1.0 - ux.hypot(uy)) / k)
    }

    /// Unsigned distance to the centreline.
    pub fn distance(&self, x: f64, y: f64) -> f64 {
        self.frenet(x, y).1.abs()
    }

    pub fn on_road(&self, x: f64, y: f64) -> bool {
        self.distance(x, y) <= self.width / 2.0
    }

    pub fn on_marking(&self, x: f64, y: f64) -> bool {
        (self.distance(x, y) - self.width / 2.0).abs() <= self.marking_width / 2.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Vehicle {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub color: usize,
}

impl Vehicle {
    /// Footprint corners, counter-clockwise.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        footprint(self.x, self.y, self.yaw, self.length, self.width)
    }

    /// Whether ground point `(x, y)` lies inside the footprint.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.x, y - self.y);
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        u.abs() <= self.length / 2.0 && v.abs() <= self.width / 2.0
    }
}

fn footprint(x: f64, y: f64, yaw: f64, length: f64, width: f64) -> [[f64; 2]; 4] {
    let (s, c) = yaw.sin_cos();
    let (hl, hw) = (length / 2.0, width / 2.0);
    [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(u, v)| [x + c * u - s * v, y + s * u + c * v])
}

/// Separating-axis overlap test for two convex quadrilaterals.
pub fn boxes_overlap(a: &[[f64; 2]; 4], b: &[[f64; 2]; 4]) -> bool {
    for poly in [a, b] {
        for i in 0..4 {
            let (p, q) = (poly[i], poly[(i + 1) % 4]);
            let axis = [q[1] - p[1], p[0] - q[0]];
            let proj = |pts: &[[f64; 2]; 4]| {
                pts.iter()
                    .map(|v| v[0] * axis[0] + v[1] * axis[1])
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d), hi.max(d)))
            };
            let (a0, a1) = proj(a);
            let (b0, b1) = proj(b);
            if a1 < b0 || b1 < a0 {
                return false;
            }
        }
    }
    true
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub lane: Lane,
    pub vehicles: Vec<Vehicle>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    /// Inclusive range of vehicle counts.
    pub vehicles: (usize, usize),
    pub curvature: (f64, f64),
    pub lane_width: (f64, f64),
    pub marking_width: f64,
    /// Vehicles are kept inside `[-extent, extent)²`.
    pub extent: f64,
    /// Share of vehicles placed on the lane, aligned with it.
    pub on_lane: f64,
    /// Free space kept between footprints.
    pub clearance: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            vehicles: (2, 8),
            curvature: (-0.05, 0.05),
            lane_width: (3.5, 7.0),
            marking_width: 0.4,
            extent: 12.0,
            on_lane: 0.5,
            clearance: 0.3,
        }
    }
}

const MAX_ATTEMPTS: usize = 1000;

pub fn sample_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    if cfg.vehicles.0 > cfg.vehicles.1 || cfg.curvature.0 > cfg.curvature.1 || cfg.lane_width.0 > cfg.lane_width.1 {
        return Err(CoreError::Config("scene config ranges must have min ≤ max".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lane = Lane {
        curvature: rng.random_range(cfg.curvature.0..=cfg.curvature.1),
        width: rng.random_range(cfg.lane_width.0..=cfg.lane_width.1),
        marking_width: cfg.marking_width,
    };
    let count = rng.random_range(cfg.vehicles.0..=cfg.vehicles.1);
    let c = cfg.clearance;
    let mut taken = vec![footprint(0.0, 0.0, 0.0, EGO_LENGTH + 2.0 * c, EGO_WIDTH + 2.0 * c)];
    let mut vehicles = Vec::with_capacity(count);
    let e = cfg.extent;
    for index in 0..count {
        let mut placed = None;
        for _ in 0..MAX_ATTEMPTS {
            let length = rng.random_range(3.6..5.0);
            let width = rng.random_range(1.6..2.0);
            let height = rng.random_range(1.4..1.9);
            let color = rng.random_range(0..PALETTE.len());
            let (x, y, yaw) = if rng.random_bool(cfg.on_lane) {
                let s = rng.random_range(-e..e);
                let max_off = ((lane.width - width) / 2.0).max(0.0);
                let off = rng.random_range(-max_off..=max_off);
                let ([px, py], th) = lane.at(s);
                let flip = if rng.random_bool(0.3) { std::f64::consts::PI } else { 0.0 };
                (px - th.sin() * off, py + th.cos() * off, th + flip)
            } else {
                (rng.random_range(-e..e), rng.random_range(-e..e), rng.random_range(-std::f64::consts::PI..std::f64::consts::PI))
            };
            let v = Vehicle {
                x,
                y,
                yaw,
                length,
                width,
                height,
                color,
            };
            let inside = v.corners().iter().all(|p| p[0] >= -e && p[0] < e && p[1] >= -e && p[1] < e);
            let grown = footprint(x, y, yaw, length + c, width + c);
            if inside && !taken.iter().any(|t| boxes_overlap(t, &grown)) {
                placed = Some((v, grown));
                break;
            }
        }
        let (v, grown) = placed.ok_or(CoreError::Placement {
            index,
            attempts: MAX_ATTEMPTS,
        })?;
        taken.push(grown);
        vehicles.push(v);
    }
    Ok(Scene { lane, vehicles })
}

/// Entry distance along `dir` of the ray `origin + t·dir` into a vehicle,
/// with the axis of the face hit (0: front/back, 1: sides, 2: roof).
pub fn ray_box(origin: Vec3, dir: Vec3, v: &Vehicle) -> Option<(f64, usize)> {
    let (s, c) = v.yaw.sin_cos();
    let (ox, oy) = (origin[0] - v.x, origin[1] - v.y);
    let o = [c * ox + s * oy, -s * ox + c * oy, origin[2]];
    let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
    let lo = [-v.length / 2.0, -v.width / 2.0, 0.0];
    let hi = [v.length / 2.0, v.width / 2.0, v.height];
    let (mut t0, mut t1, mut axis) = (f64::NEG_INFINITY, f64::INFINITY, 0);
    for a in 0..3 {
        if d[a].abs() < 1e-12 {
            if o[a] < lo[a] || o[a] > hi[a] {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        if ta > t0 {
            t0 = ta;
            axis = a;
        }
        t1 = t1.min(tb);
    }
    (t0 <= t1 && t0 > 0.0).then_some((t0, axis))
}

/// Rendered views: images `[n, 3, H, W]` in `[0, 1]` and camera z-depth
/// `[n, H, W]` (`+inf` where the ray sees sky).
pub fn render(scene: &Scene, rig: &CameraRig) -> (Tensor<f32>, Tensor<f32>) {
    let (h, w) = rig.image_size();
    let n = rig.len();
    let mut img = vec![0f32; n * 3 * h * w];
    let mut depth = vec![f32::INFINITY; n * h * w];
    for (k, cam) in rig.cameras().iter().enumerate() {
        let e = &cam.extrinsics;
        let origin = e.translation;
        for i in 0..h {
            for j in 0..w {
                let rc = cam.ray(i as f64 + 0.5, j as f64 + 0.5);
                let r = e.rotation;
                // Rotating the camera ray keeps its camera-z at 1, so the hit
                // parameter is the z-depth.
                let dir = [
                    r[0][0] * rc[0] + r[0][1] * rc[1] + r[0][2] * rc[2],
                    r[1][0] * rc[0] + r[1][1] * rc[1] + r[1][2] * rc[2],
                    r[2][0] * rc[0] + r[2][1] * rc[1] + r[2][2] * rc[2],
                ];
                let mut best = f64::INFINITY;
                let mut color = SKY;
                if dir[2] < 0.0 {
                    let t = -origin[2] / dir[2];
                    let (x, y) = (origin[0] + t * dir[0], origin[1] + t * dir[1]);
                    best = t;
                    color = if scene.lane.on_marking(x, y) {
                        MARKING
                    } else if scene.lane.on_road(x, y) {
                        ROAD
                    } else {
                        GRASS
                    };
                }
                for v in &scene.vehicles {
                    if let Some((t, axis)) = ray_box(origin, dir, v) {
                        if t < best {
                            best = t;
                            let shade = [0.8, 0.6, 1.0][axis];
                            color = PALETTE[v.color].map(|c| c * shade);
                        }
                    }
                }
                let px = i * w + j;
                for (ch, &cv) in color.iter().enumerate() {
                    img[(k * 3 + ch) * h * w + px] = cv;
                }
                depth[k * h * w + px] = best as f32;
            }
        }
    }
    (
        Tensor::from_vec([n, 3, h, w], img).expect("image shape"),
        Tensor::from_vec([n, h, w], depth).expect("depth shape"),
    )
}

/// Vehicle, drivable and lane-marking rasters, each `[X, Y]`, tested at
/// cell centres.
pub fn rasterize_bev(scene: &Scene, spec: &BevGridSpec) -> [Tensor<f32>; 3] {
    let (nx, ny) = (spec.nx(), spec.ny());
    let mut out = [vec![0f32; nx * ny], vec![0f32; nx * ny], vec![0f32; nx * ny]];
    for ix in 0..nx {
        for iy in 0..ny {
            let (x, y) = spec.cell_center(ix, iy);
            let k = ix * ny + iy;
            out[0][k] = scene.vehicles.iter().any(|v| v.contains(x, y)) as u8 as f32;
            out[1][k] = scene.lane.on_road(x, y) as u8 as f32;
            out[2][k] = scene.lane.on_marking(x, y) as u8 as f32;
        }
    }
    out.map(|d| Tensor::from_vec([nx, ny], d).expect("raster shape"))
}

/// Arc distance to the nearest vehicle blocking the lane ahead, if any.
pub fn blocking_distance(scene: &Scene) -> Option<f64> {
    scene
        .vehicles
        .iter()
        .filter_map(|v| {
            let (s, lat) = scene.lane.frenet(v.x, v.y);
            (s > 0.0 && s <= BLOCKING_RANGE && lat.abs() < scene.lane.width / 2.0).then_some(s)
        })
        .min_by(f64::total_cmp)
}

/// Lane following at a speed drawn from `[3, 12]` m/s with a small lateral
/// drift, braking to a stop over one second when the lane is blocked.
/// Points are at `t = j·dt` for `j = 1..=horizon`.
pub fn expert_trajectory(scene: &Scene, horizon: usize, dt: f64, seed: u64) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speed = rng.random_range(3.0..=12.0);
    let drift: f64 = StandardNormal.sample(&mut rng);
    follow_lane(scene, speed, (0.1 * drift).clamp(-0.3, 0.3), horizon, dt)
}

/// The deterministic part of [`expert_trajectory`]: `drift` is the lateral
/// offset reached at the last point.
pub fn follow_lane(scene: &Scene, speed: f64, drift: f64, horizon: usize, dt: f64) -> Trajectory {
    let blocked = blocking_distance(scene).is_some();
    let total = horizon as f64 * dt;
    let points = (1..=horizon)
        .map(|j| {
            let t = j as f64 * dt;
            let s = if blocked {
                let tb = t.min(1.0);
                speed * (tb - tb * tb / 2.0)
            } else {
                speed * t
            };
            let lat = drift * t / total;
            let ([x, y], th) = scene.lane.at(s);
            [x - th.sin() * lat, y + th.cos() * lat, t]
        })
        .collect();
    Trajectory { points }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub scene: SceneConfig,
    pub grid: BevGridSpec,
    pub horizon: usize,
    pub dt: f64,
}

/// One frame of the synthetic world.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub rig: CameraRig,
    /// `[n, 3, H, W]`.
    pub images: Tensor<f32>,
    /// `[n, H, W]`.
    pub depths: Tensor<f32>,
    pub bev_vehicle: Tensor<f32>,
    pub bev_drivable: Tensor<f32>,
    pub bev_lane: Tensor<f32>,
    pub expert: Trajectory,
}

/// Seed of sample `index` in a dataset generated from `base`.
pub fn sample_seed(base: u64, index: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64).rotate_left(17)
}

pub fn generate_sample(seed: u64, rig: &CameraRig, cfg: &WorldConfig) -> Result<Sample> {
    let scene = sample_scene(seed, &cfg.scene)?;
    let (images, depths) = render(&scene, rig);
    let [bev_vehicle, bev_drivable, bev_lane] = rasterize_bev(&scene, &cfg.grid);
    let expert = expert_trajectory(&scene, cfg.horizon, cfg.dt, seed ^ 0x7a3c_9e11);
    Ok(Sample {
        rig: rig.clone(),
        images,
        depths,
        bev_vehicle,
        bev_drivable,
        bev_lane,
        expert,
    })
}

pub fn generate_dataset(base_seed: u64, count: usize, rig: &CameraRig, cfg: &WorldConfig) -> Result<Vec<Sample>> {
    (0..count).map(|i| generate_sample(sample_seed(base_seed, i), rig, cfg)).collect()
}

fn sample_dir(dir: &Path, index: usize) -> std::path::PathBuf {
    dir.join(format!("sample_{index}"))
}

fn save_f32(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_tensor(&mut w, t)?;
    std::io::Write::flush(&mut w)?;
    Ok(())
}

pub fn write_sample(dir: &Path, index: usize, s: &Sample) -> Result<()> {
    let d = sample_dir(dir, index);
    fs::create_dir_all(&d)?;
    fs::write(d.join("calib.txt"), s.rig.to_calibration_text())?;
    let (n, h, w) = (s.rig.len(), s.rig.image_size().0, s.rig.image_size().1);
    for k in 0..n {
        let img = &s.images.data()[k * 3 * h * w..(k + 1) * 3 * h * w];
        save_f32(&d.join(format!("image_{k}.f32")), &Tensor::from_vec([3, h, w], img.to_vec())?)?;
        let dep = &s.depths.data()[k * h * w..(k + 1) * h * w];
        save_f32(&d.join(format!("depth_{k}.f32")), &Tensor::from_vec([h, w], dep.to_vec())?)?;
    }
    save_f32(&d.join("bev_vehicle.f32"), &s.bev_vehicle)?;
    save_f32(&d.join("bev_drivable.f32"), &s.bev_drivable)?;
    save_f32(&d.join("bev_lane.f32"), &s.bev_lane)?;
    fs::write(d.join("expert.txt"), s.expert.to_text())?;
    Ok(())
}

/// Writes every sample plus a `dataset.txt` manifest holding the count.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        write_sample(dir, i, s)?;
    }
    fs::write(dir.join("dataset.txt"), format!("count {}\n", samples.len()))?;
    Ok(())
}

pub fn read_sample(dir: &Path, index: usize) -> Result<Sample> {
    let d = sample_dir(dir, index);
    let fail = |field: &str, msg: String| CoreError::Dataset {
        sample: index,
        field: field.to_string(),
        msg,
    };
    let text = |field: &str| fs::read_to_string(d.join(field)).map_err(|e| fail(field, e.to_string()));
    let load_any = |field: &str| -> Result<Tensor<f32>> {
        let f = fs::File::open(d.join(field)).map_err(|e| fail(field, e.to_string()))?;
        read_tensor(&mut BufReader::new(f)).map_err(|e| fail(field, e.to_string()))
    };
    let load = |field: &str, shape: &[usize]| -> Result<Tensor<f32>> {
        let t = load_any(field)?;
        if t.shape() != shape {
            return Err(fail(field, format!("shape {:?}, expected {:?}", t.shape(), shape)));
        }
        Ok(t)
    };
    let rig = CameraRig::from_calibration_text(&text("calib.txt")?).map_err(|e| fail("calib.txt", e.to_string()))?;
    let (n, (h, w)) = (rig.len(), rig.image_size());
    let mut images = Vec::with_capacity(n * 3 * h * w);
    let mut depths = Vec::with_capacity(n * h * w);
    for k in 0..n {
        images.extend_from_slice(load(&format!("image_{k}.f32"), &[3, h, w])?.data());
        depths.extend_from_slice(load(&format!("depth_{k}.f32"), &[h, w])?.data());
    }
    let vehicle = load_any("bev_vehicle.f32")?;
    let grid = vehicle.shape().to_vec();
    let expert = Trajectory::from_text(&text("expert.txt")?).map_err(|e| fail("expert.txt", e.to_string()))?;
    Ok(Sample {
        images: Tensor::from_vec([n, 3, h, w], images)?,
        depths: Tensor::from_vec([n, h, w], depths)?,
        bev_vehicle: vehicle,
        bev_drivable: load("bev_drivable.f32", &grid)?,
        bev_lane: load("bev_lane.f32", &grid)?,
        expert,
        rig,
    })
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let manifest = fs::read_to_string(dir.join("dataset.txt")).map_err(|e| CoreError::Dataset {
        sample: 0,
        field: "dataset.txt".into(),
        msg: e.to_string(),
    })?;
    let count: usize = manifest
        .split_whitespace()
        .nth(1)
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| CoreError::Dataset {
            sample: 0,
            field: "dataset.txt".into(),
            msg: format!("bad manifest `{}`", manifest.trim()),
        })?;
    (0..count).map(|i| read_sample(dir, i)).collect()
}
