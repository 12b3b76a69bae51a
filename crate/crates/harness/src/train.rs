//! Training loop, evaluation and the on-disk run directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use lss_core::bev_head::{segmentation_loss, IouCounts, Task};
use lss_core::pipeline::{forward, init_model, ModelConfig};
use lss_core::shoot::{fit_templates, plan_distribution, plan_label, planning_loss, score_templates, template_taps, top_k_hit, TemplateSet, Trajectory};
use lss_core::synth::{read_dataset, Sample};
use lss_tensor::nn::{apply_bn_stats, BN_MOMENTUM};
use lss_tensor::{Ctx, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{make_batch, targets, Drop, SampleViews, ViewPolicy};
use crate::optim::{Adam, AdamConfig};

pub const TEMPLATE_COUNT: usize = 64;
pub const EVAL_BATCH: usize = 8;
pub const TOP_K: [usize; 3] = [5, 10, 20];

/// A model ready to run: its architecture, weights and, for planning, the
/// template set it scores.
pub struct Model {
    pub run: RunConfig,
    pub cfg: ModelConfig,
    pub store: ParamStore<f32>,
    pub templates: Option<Planner>,
}

pub struct Planner {
    pub set: TemplateSet,
    pub taps: Arc<Vec<Vec<(u32, f64)>>>,
}

impl Planner {
    pub fn new(set: TemplateSet, run: &RunConfig) -> Result<Self> {
        let taps = Arc::new(template_taps(&set, &run.grid()?, run.sampling));
        Ok(Planner { set, taps })
    }

    pub fn labels(&self, samples: &[Sample], plan: &[SampleViews]) -> Result<Vec<usize>> {
        plan.iter()
            .map(|sv| Ok(plan_label(&samples[sv.index].expert, &self.set)?))
            .collect()
    }
}

impl Model {
    pub fn init(run: &RunConfig, planner: Option<Planner>) -> Result<Self> {
        let cfg = run.model()?;
        if run.task == Task::Plan && planner.is_none() {
            bail!("the planning task needs templates");
        }
        Ok(Model {
            run: run.clone(),
            store: init_model(&cfg, run.seed)?,
            cfg,
            templates: planner,
        })
    }

    /// Loads `model.ckpt` (or the given checkpoint) with the config and
    /// templates saved beside it.
    pub fn load(ckpt: &Path) -> Result<Self> {
        let dir = ckpt.parent().unwrap_or(Path::new("."));
        let run = RunConfig::from_text(&fs::read_to_string(dir.join("config.txt")).with_context(|| format!("no config.txt beside {}", ckpt.display()))?)?;
        let planner = if run.task == Task::Plan {
            let text = fs::read_to_string(dir.join("templates.txt")).context("reading the run's templates.txt")?;
            Some(Planner::new(TemplateSet::from_text(&text)?, &run)?)
        } else {
            None
        };
        let mut model = Model::init(&run, planner)?;
        model
            .store
            .load_checkpoint(ckpt)
            .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
        Ok(model)
    }

    /// Raw output `[B, 1, X, Y]`: segmentation logits or the cost map.
    pub fn output(&self, ctx: &mut Ctx<'_, f32>, samples: &[Sample], plan: &[SampleViews]) -> Result<Var> {
        let batch = make_batch(samples, plan);
        Ok(forward(ctx, &self.cfg, &batch)?)
    }

    /// Template scores `[B, K]` from the cost map.
    pub fn scores(&self, ctx: &mut Ctx<'_, f32>, cost: Var) -> Result<Var> {
        let p = self.templates.as_ref().ok_or_else(|| anyhow!("model has no templates"))?;
        Ok(score_templates(&mut ctx.graph, cost, &p.taps, &self.cfg.grid)?)
    }

    pub fn loss(&self, ctx: &mut Ctx<'_, f32>, samples: &[Sample], plan: &[SampleViews]) -> Result<Var> {
        let out = self.output(ctx, samples, plan)?;
        if self.run.task == Task::Plan {
            let labels = self.templates.as_ref().expect("checked at init").labels(samples, plan)?;
            let s = self.scores(ctx, out)?;
            Ok(planning_loss(&mut ctx.graph, s, &labels)?)
        } else {
            let t = targets(samples, plan, self.run.task)?;
            Ok(segmentation_loss(&mut ctx.graph, out, &t, self.run.task.name())?)
        }
    }

    /// Logits (segmentation) or plan probabilities, evaluation mode.
    pub fn predict(&self, samples: &[Sample], plan: &[SampleViews]) -> Result<Tensor<f32>> {
        let mut ctx = Ctx::new(&self.store, false);
        let out = self.output(&mut ctx, samples, plan)?;
        let out = if self.run.task == Task::Plan {
            let s = self.scores(&mut ctx, out)?;
            plan_distribution(&mut ctx.graph, s)?
        } else {
            out
        };
        Ok(ctx.graph.value(out).clone())
    }

    /// Evaluation-mode cost map `[B, 1, X, Y]` regardless of task.
    pub fn raw(&self, samples: &[Sample], plan: &[SampleViews]) -> Result<Tensor<f32>> {
        let mut ctx = Ctx::new(&self.store, false);
        let out = self.output(&mut ctx, samples, plan)?;
        Ok(ctx.graph.value(out).clone())
    }
}

/// Evaluation conditions; the default is the training camera set, clean.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub policy: ViewPolicy,
    pub seed: u64,
}

impl Condition {
    pub fn clean(run: &RunConfig) -> Self {
        Condition {
            policy: ViewPolicy::all(run.training_cameras()),
            seed: run.seed,
        }
    }
}

/// Named metric values: `iou` for segmentation, `top5`/`top10`/`top20` for planning.
pub type Metrics = Vec<(String, f64)>;

pub fn metric(m: &Metrics, name: &str) -> f64 {
    m.iter().find(|(n, _)| n == name).map_or(f64::NAN, |(_, v)| *v)
}

pub fn evaluate(model: &Model, samples: &[Sample], cond: &Condition) -> Result<Metrics> {
    let mut iou = IouCounts::default();
    let mut hits = [0usize; 3];
    for start in (0..samples.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(samples.len());
        let plan = (start..end)
            .map(|i| cond.policy.choose_eval(&samples[i], i, cond.seed))
            .collect::<Result<Vec<_>>>()?;
        let pred = model.predict(samples, &plan)?;
        if model.run.task == Task::Plan {
            let labels = model.templates.as_ref().expect("planning model").labels(samples, &plan)?;
            let k = pred.shape()[1];
            for (b, &l) in labels.iter().enumerate() {
                let row = &pred.data()[b * k..(b + 1) * k];
                for (h, &top) in hits.iter_mut().zip(&TOP_K) {
                    *h += top_k_hit(row, l, top) as usize;
                }
            }
        } else {
            let t = targets(samples, &plan, model.run.task)?;
            iou.add(pred.data(), t.data(), 0.5);
        }
    }
    Ok(if model.run.task == Task::Plan {
        TOP_K
            .iter()
            .zip(hits)
            .map(|(k, h)| (format!("top{k}"), h as f64 / samples.len().max(1) as f64))
            .collect()
    } else {
        vec![("iou".to_string(), iou.iou())]
    })
}

/// Everything a training run produces.
pub struct TrainOutcome {
    pub model: Model,
    pub losses: Vec<f32>,
    pub initial: Metrics,
    pub metrics: Metrics,
}

fn write_csv(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "{header}")?;
    for r in rows {
        writeln!(f, "{r}")?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_metrics(path: &Path, m: &Metrics) -> Result<()> {
    write_csv(path, "metric,value", m.iter().map(|(k, v)| format!("{k},{v}")))
}

pub fn templates_for(run: &RunConfig, train: &[Sample]) -> Result<Option<Planner>> {
    if run.task != Task::Plan {
        return Ok(None);
    }
    let set = match &run.templates {
        Some(p) => TemplateSet::from_text(&fs::read_to_string(p).with_context(|| format!("reading templates {}", p.display()))?)?,
        None => {
            let experts: Vec<Trajectory> = train.iter().map(|s| s.expert.clone()).collect();
            fit_templates(&experts, TEMPLATE_COUNT, run.seed)?
        }
    };
    Ok(Some(Planner::new(set, run)?))
}

/// Trains on `train`, evaluates on `val`, and when `out` is given writes
/// the run directory: `config.txt`, `loss.csv`, `report.csv`, periodic
/// `ckpt_<step>.ckpt` files, `model.ckpt` and, for planning, `templates.txt`.
pub fn train(run: &RunConfig, train: &[Sample], val: &[Sample], out: Option<&Path>) -> Result<TrainOutcome> {
    if train.is_empty() {
        bail!("empty training set");
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), run.to_text())?;
    }
    let planner = templates_for(run, train)?;
    if let (Some(dir), Some(p)) = (out, &planner) {
        fs::write(dir.join("templates.txt"), p.set.to_text())?;
    }
    let mut model = Model::init(run, planner)?;
    let clean = Condition::clean(run);
    let initial = evaluate(&model, val, &clean)?;

    let mut adam = Adam::new(AdamConfig {
        lr: run.lr,
        weight_decay: run.weight_decay,
        ..AdamConfig::default()
    });
    let policy = ViewPolicy {
        cameras: run.training_cameras(),
        drop: if run.drop_n > 0 { Drop::Random(run.drop_n) } else { Drop::None },
        noise_rot: run.noise_rot,
        noise_trans: run.noise_trans,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(run.steps);
    let mut last_finite = f32::NAN;
    for step in 0..run.steps {
        let mut plan = Vec::with_capacity(run.batch);
        for _ in 0..run.batch {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
            }
            let i = order.pop().expect("refilled");
            plan.push(policy.choose(&train[i], i, &mut rng)?);
        }
        let (loss, grads, stats) = {
            let mut ctx = Ctx::new(&model.store, true);
            let l = model
                .loss(&mut ctx, train, &plan)
                .with_context(|| format!("training failed at step {step}; last finite loss {last_finite}"))?;
            let loss = ctx.graph.value(l).item();
            if !loss.is_finite() {
                bail!("non-finite loss {loss} at step {step}; last finite loss {last_finite}");
            }
            ctx.backward(l)?;
            (loss, ctx.grads(), ctx.take_bn_stats())
        };
        adam.step(&mut model.store, &grads)?;
        apply_bn_stats(&mut model.store, &stats, BN_MOMENTUM)?;
        losses.push(loss);
        last_finite = loss;
        if let Some(dir) = out {
            if run.checkpoint_every > 0 && (step + 1) % run.checkpoint_every == 0 {
                model.store.save_checkpoint(&dir.join(format!("ckpt_{}.ckpt", step + 1)))?;
            }
        }
    }
    let metrics = if run.steps == 0 { initial.clone() } else { evaluate(&model, val, &clean)? };
    if let Some(dir) = out {
        model.store.save_checkpoint(&dir.join("model.ckpt"))?;
        write_csv(&dir.join("loss.csv"), "step,loss", losses.iter().enumerate().map(|(i, l)| format!("{},{l}", i + 1)))?;
        let mut report = vec![("steps".to_string(), run.steps as f64)];
        report.extend(initial.iter().map(|(k, v)| (format!("initial_{k}"), *v)));
        report.extend(metrics.iter().cloned());
        write_metrics(&dir.join("report.csv"), &report)?;
    }
    Ok(TrainOutcome {
        model,
        losses,
        initial,
        metrics,
    })
}

/// Trains from the config's dataset paths.
pub fn train_from_config(run: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    let tr = read_dataset(&run.train_data).with_context(|| format!("training data {}", run.train_data.display()))?;
    let va = read_dataset(&run.val_data).with_context(|| format!("validation data {}", run.val_data.display()))?;
    train(run, &tr, &va, Some(out))
}

pub fn run_dir_checkpoint(run_dir: &Path) -> PathBuf {
    run_dir.join("model.ckpt")
}
