//! Run configuration: `key = value` lines grouped under `[section]` headers.
//! Every key has a default; unknown keys are errors.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use ini::Ini;
use lss_core::bev_head::{BevHeadConfig, Task};
use lss_core::camera::{CameraRig, DepthBinSpec};
use lss_core::lift::{EncoderConfig, LiftMode};
use lss_core::pipeline::{Arch, ModelConfig};
use lss_core::shoot::CostSampling;
use lss_core::splat::BevGridSpec;
use lss_core::synth::{SceneConfig, WorldConfig};

pub const SEED_ENV: &str = "LSS_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,

    pub train_data: PathBuf,
    pub val_data: PathBuf,

    pub rig: String,
    pub image_height: usize,
    pub image_width: usize,
    pub hfov: f64,
    /// Rig cameras the model sees; `None` means all of them.
    pub cameras: Option<Vec<usize>>,

    pub vehicles_min: usize,
    pub vehicles_max: usize,
    pub curvature: f64,
    pub lane_width_min: f64,
    pub lane_width_max: f64,
    pub horizon: usize,
    pub dt: f64,

    pub d0: f64,
    pub delta: f64,
    pub depth_bins: usize,

    pub grid_half: f64,
    pub grid_cell: f64,

    pub arch: Arch,
    pub lift: LiftMode,
    pub context: usize,
    pub encoder: Vec<usize>,
    pub stem: usize,
    pub head: [usize; 3],
    pub blocks: usize,
    pub up: usize,
    pub symmetrize: bool,

    pub task: Task,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub checkpoint_every: usize,

    pub drop_n: usize,
    pub noise_rot: f64,
    pub noise_trans: f64,

    pub templates: Option<PathBuf>,
    pub sampling: CostSampling,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            train_data: PathBuf::from("data/train"),
            val_data: PathBuf::from("data/val"),
            rig: "toy4".into(),
            image_height: 64,
            image_width: 64,
            hfov: 100.0,
            cameras: None,
            vehicles_min: 2,
            vehicles_max: 8,
            curvature: 0.05,
            lane_width_min: 3.5,
            lane_width_max: 7.0,
            horizon: 8,
            dt: 0.5,
            d0: 2.0,
            delta: 1.0,
            depth_bins: 12,
            grid_half: 12.0,
            grid_cell: 0.75,
            arch: Arch::Lss,
            lift: LiftMode::Learned,
            context: 16,
            encoder: vec![16, 32, 32],
            stem: 16,
            head: [16, 32, 64],
            blocks: 1,
            up: 32,
            symmetrize: false,
            task: Task::Vehicle,
            steps: 3000,
            batch: 4,
            lr: 1e-3,
            weight_decay: 1e-7,
            checkpoint_every: 1000,
            drop_n: 0,
            noise_rot: 0.0,
            noise_trans: 0.0,
            templates: None,
            sampling: CostSampling::Nearest,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| anyhow!("`{key}`: cannot parse `{v}`: {e}"))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

fn list_text(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn sampling_name(s: CostSampling) -> &'static str {
    match s {
        CostSampling::Nearest => "nearest",
        CostSampling::Bilinear => "bilinear",
    }
}

fn arch_name(a: Arch) -> &'static str {
    match a {
        Arch::Lss => "lss",
        Arch::Cnn => "cnn",
    }
}

fn lift_name(m: LiftMode) -> &'static str {
    match m {
        LiftMode::Learned => "learned",
        LiftMode::Uniform => "uniform",
        LiftMode::Oracle => "oracle",
    }
}

impl RunConfig {
    /// Parses config text over the defaults. `LSS_SEED` is not consulted.
    pub fn from_text(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).context("config syntax")?;
        let mut cfg = RunConfig::default();
        for (section, props) in ini.iter() {
            for (key, value) in props.iter() {
                cfg.set(section.unwrap_or(""), key, value.trim())?;
            }
        }
        cfg.model()?;
        Ok(cfg)
    }

    /// Reads a config file and applies the `LSS_SEED` override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = RunConfig::from_text(&text).with_context(|| format!("in config {}", path.display()))?;
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.seed = parse(SEED_ENV, seed.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        match (section, key) {
            ("", "seed") => self.seed = parse(key, v)?,
            ("data", "train") => self.train_data = v.into(),
            ("data", "val") => self.val_data = v.into(),
            ("rig", "kind") => {
                if v != "toy4" && v != "toy6" {
                    bail!("`rig.kind`: unknown rig `{v}` (toy4, toy6)");
                }
                self.rig = v.into()
            }
            ("rig", "height") => self.image_height = parse(key, v)?,
            ("rig", "width") => self.image_width = parse(key, v)?,
            ("rig", "hfov") => self.hfov = parse(key, v)?,
            ("rig", "cameras") => self.cameras = if v == "all" { None } else { Some(parse_list(key, v)?) },
            ("world", "vehicles_min") => self.vehicles_min = parse(key, v)?,
            ("world", "vehicles_max") => self.vehicles_max = parse(key, v)?,
            ("world", "curvature") => self.curvature = parse(key, v)?,
            ("world", "lane_width_min") => self.lane_width_min = parse(key, v)?,
            ("world", "lane_width_max") => self.lane_width_max = parse(key, v)?,
            ("world", "horizon") => self.horizon = parse(key, v)?,
            ("world", "dt") => self.dt = parse(key, v)?,
            ("depth", "d0") => self.d0 = parse(key, v)?,
            ("depth", "delta") => self.delta = parse(key, v)?,
            ("depth", "bins") => self.depth_bins = parse(key, v)?,
            ("grid", "half") => self.grid_half = parse(key, v)?,
            ("grid", "cell") => self.grid_cell = parse(key, v)?,
            ("model", "arch") => self.arch = parse(key, v)?,
            ("model", "lift") => self.lift = parse(key, v)?,
            ("model", "context") => self.context = parse(key, v)?,
            ("model", "encoder") => self.encoder = parse_list(key, v)?,
            ("model", "stem") => self.stem = parse(key, v)?,
            ("model", "head") => {
                let w = parse_list(key, v)?;
                self.head = w.try_into().map_err(|_| anyhow!("`model.head` needs three widths, got `{v}`"))?;
            }
            ("model", "blocks") => self.blocks = parse(key, v)?,
            ("model", "up") => self.up = parse(key, v)?,
            ("model", "symmetrize") => self.symmetrize = parse(key, v)?,
            ("train", "task") => self.task = parse(key, v)?,
            ("train", "steps") => self.steps = parse(key, v)?,
            ("train", "batch") => self.batch = parse(key, v)?,
            ("train", "lr") => self.lr = parse(key, v)?,
            ("train", "weight_decay") => self.weight_decay = parse(key, v)?,
            ("train", "checkpoint_every") => self.checkpoint_every = parse(key, v)?,
            ("augment", "drop_n") => self.drop_n = parse(key, v)?,
            ("augment", "noise_rot") => self.noise_rot = parse(key, v)?,
            ("augment", "noise_trans") => self.noise_trans = parse(key, v)?,
            ("plan", "templates") => self.templates = Some(v.into()),
            ("plan", "sampling") => {
                self.sampling = match v {
                    "nearest" => CostSampling::Nearest,
                    "bilinear" => CostSampling::Bilinear,
                    _ => bail!("`plan.sampling`: unknown sampling `{v}` (nearest, bilinear)"),
                }
            }
            _ if section.is_empty() => bail!("unknown config key `{key}`"),
            _ => bail!("unknown config key `{key}` in section [{section}]"),
        }
        Ok(())
    }

    /// The full configuration, every key included, in the format `from_text` reads.
    pub fn to_text(&self) -> String {
        let cams = self.cameras.as_deref().map_or("all".to_string(), list_text);
        let mut s = format!("seed = {}\n", self.seed);
        s += &format!("\n[data]\ntrain = {}\nval = {}\n", self.train_data.display(), self.val_data.display());
        s += &format!(
            "\n[rig]\nkind = {}\nheight = {}\nwidth = {}\nhfov = {}\ncameras = {cams}\n",
            self.rig, self.image_height, self.image_width, self.hfov
        );
        s += &format!(
            "\n[world]\nvehicles_min = {}\nvehicles_max = {}\ncurvature = {}\nlane_width_min = {}\nlane_width_max = {}\nhorizon = {}\ndt = {}\n",
            self.vehicles_min, self.vehicles_max, self.curvature, self.lane_width_min, self.lane_width_max, self.horizon, self.dt
        );
        s += &format!("\n[depth]\nd0 = {}\ndelta = {}\nbins = {}\n", self.d0, self.delta, self.depth_bins);
        s += &format!("\n[grid]\nhalf = {}\ncell = {}\n", self.grid_half, self.grid_cell);
        s += &format!(
            "\n[model]\narch = {}\nlift = {}\ncontext = {}\nencoder = {}\nstem = {}\nhead = {}\nblocks = {}\nup = {}\nsymmetrize = {}\n",
            arch_name(self.arch),
            lift_name(self.lift),
            self.context,
            list_text(&self.encoder),
            self.stem,
            list_text(&self.head),
            self.blocks,
            self.up,
            self.symmetrize
        );
        s += &format!(
            "\n[train]\ntask = {}\nsteps = {}\nbatch = {}\nlr = {}\nweight_decay = {}\ncheckpoint_every = {}\n",
            self.task.name(),
            self.steps,
            self.batch,
            self.lr,
            self.weight_decay,
            self.checkpoint_every
        );
        s += &format!(
            "\n[augment]\ndrop_n = {}\nnoise_rot = {}\nnoise_trans = {}\n",
            self.drop_n, self.noise_rot, self.noise_trans
        );
        s += "\n[plan]\n";
        if let Some(t) = &self.templates {
            s += &format!("templates = {}\n", t.display());
        }
        s += &format!("sampling = {}\n", sampling_name(self.sampling));
        s
    }

    pub fn rig(&self) -> Result<CameraRig> {
        Ok(match self.rig.as_str() {
            "toy6" => CameraRig::toy6(self.image_height, self.image_width, self.hfov)?,
            _ => CameraRig::toy4(self.image_height, self.image_width, self.hfov)?,
        })
    }

    pub fn grid(&self) -> Result<BevGridSpec> {
        Ok(BevGridSpec::square(self.grid_half, self.grid_cell)?)
    }

    pub fn world(&self) -> Result<WorldConfig> {
        Ok(WorldConfig {
            scene: SceneConfig {
                vehicles: (self.vehicles_min, self.vehicles_max),
                curvature: (-self.curvature, self.curvature),
                lane_width: (self.lane_width_min, self.lane_width_max),
                ..SceneConfig::default()
            },
            grid: self.grid()?,
            horizon: self.horizon,
            dt: self.dt,
        })
    }

    /// Camera slots in the dataset rig.
    pub fn rig_size(&self) -> usize {
        if self.rig == "toy6" {
            6
        } else {
            4
        }
    }

    pub fn training_cameras(&self) -> Vec<usize> {
        self.cameras.clone().unwrap_or_else(|| (0..self.rig_size()).collect())
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let cameras = self.rig_size();
        if let Some(c) = self.cameras.as_ref().and_then(|c| c.iter().find(|&&k| k >= cameras)) {
            bail!("`rig.cameras`: camera {c} is not in a {cameras}-camera rig");
        }
        let in_channels = match self.arch {
            Arch::Lss => self.context,
            Arch::Cnn => self.context * cameras,
        };
        let cfg = ModelConfig {
            arch: self.arch,
            lift_mode: self.lift,
            task: self.task,
            image_height: self.image_height,
            image_width: self.image_width,
            cameras,
            bins: DepthBinSpec::new(self.d0, self.delta, self.depth_bins)?,
            encoder: EncoderConfig {
                widths: self.encoder.clone(),
                depth_bins: self.depth_bins,
                context: self.context,
            },
            grid: self.grid()?,
            head: BevHeadConfig {
                in_channels,
                stem: self.stem,
                widths: self.head,
                blocks_per_stage: self.blocks,
                up: self.up,
                out_channels: 1,
                symmetrize: self.symmetrize,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
