//! Template-trajectory planning on a learned cost map.

use std::fmt::Write as _;
use std::sync::Arc;

use lss_tensor::{Float, Graph, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::splat::BevGridSpec;

/// `T` points `(x, y, t)` in the ego frame with strictly increasing `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub points: Vec<[f64; 3]>,
}

impl Trajectory {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.windows(2).any(|w| !(w[1][2] > w[0][2])) {
            return Err(CoreError::Templates("trajectory timestamps must strictly increase".into()));
        }
        Ok(Trajectory { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn xy(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p[0], p[1]]).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for p in &self.points {
            let _ = writeln!(s, "{} {} {}", p[0], p[1], p[2]);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut pts = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            pts.push(parse_row(line, i + 1)?);
        }
        Trajectory::new(pts)
    }
}

fn parse_row(line: &str, n: usize) -> Result<[f64; 3]> {
    let v: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CoreError::Templates(format!("line {n}: expected numbers, got `{line}`")))?;
    if v.len() != 3 {
        return Err(CoreError::Templates(format!("line {n}: expected `x y t`, got `{line}`")));
    }
    Ok([v[0], v[1], v[2]])
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemplateSet {
    pub templates: Vec<Trajectory>,
}

impl TemplateSet {
    pub fn new(templates: Vec<Trajectory>) -> Result<Self> {
        let t = templates.first().map(|t| t.len()).unwrap_or(0);
        if templates.is_empty() || templates.iter().any(|x| x.len() != t || t == 0) {
            return Err(CoreError::Templates("templates must be non-empty and share one length".into()));
        }
        Ok(TemplateSet { templates })
    }

    pub fn k(&self) -> usize {
        self.templates.len()
    }

    pub fn horizon(&self) -> usize {
        self.templates[0].len()
    }

    /// Header `K T`, then `K·T` rows `x y t`.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.k(), self.horizon());
        for t in &self.templates {
            s.push_str(&t.to_text());
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| CoreError::Templates("empty template file".into()))?;
        let hv: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| CoreError::Templates(format!("bad header `{header}`")))?;
        let [k, t] = hv[..] else {
            return Err(CoreError::Templates(format!("header must be `K T`, got `{header}`")));
        };
        let mut templates = Vec::with_capacity(k);
        for i in 0..k {
            let mut pts = Vec::with_capacity(t);
            for _ in 0..t {
                let (n, line) = lines
                    .next()
                    .ok_or_else(|| CoreError::Templates(format!("template {i} is truncated")))?;
                pts.push(parse_row(line, n + 1)?);
            }
            templates.push(Trajectory::new(pts)?);
        }
        TemplateSet::new(templates)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// K-Means over flattened `(x, y)` coordinates with k-means++ seeding.
/// Stops after 100 iterations or when no centroid moves more than 1e-6.
pub fn fit_templates(expert: &[Trajectory], k: usize, seed: u64) -> Result<TemplateSet> {
    if k == 0 || expert.len() < k {
        return Err(CoreError::Templates(format!("need at least K={k} trajectories, got {}", expert.len())));
    }
    let t = expert[0].len();
    if expert.iter().any(|e| e.len() != t) {
        return Err(CoreError::Templates("expert trajectories differ in length".into()));
    }
    let data: Vec<Vec<f64>> = expert.iter().map(|e| e.xy()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids: Vec<Vec<f64>> = vec![data[rng.random_range(0..data.len())].clone()];
    let mut d2: Vec<f64> = data.iter().map(|x| sq_dist(x, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let r = rng.random_range(0.0..total);
            let mut acc = 0.0;
            d2.iter()
                .position(|&d| {
                    acc += d;
                    acc > r
                })
                .unwrap_or(data.len() - 1)
        } else {
            rng.random_range(0..data.len())
        };
        centroids.push(data[pick].clone());
        let c = centroids.last().expect("just pushed");
        for (d, x) in d2.iter_mut().zip(&data) {
            *d = d.min(sq_dist(x, c));
        }
    }

    let dim = 2 * t;
    for _ in 0..100 {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for x in &data {
            let j = nearest(&centroids, x);
            counts[j] += 1;
            for (s, v) in sums[j].iter_mut().zip(x) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for j in 0..k {
            // An empty cluster keeps its previous centroid.
            if counts[j] == 0 {
                continue;
            }
            let new: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            shift = shift.max(sq_dist(&new, &centroids[j]).sqrt());
            centroids[j] = new;
        }
        if shift < 1e-6 {
            break;
        }
    }

    let times: Vec<f64> = expert[0].points.iter().map(|p| p[2]).collect();
    let templates = centroids
        .into_iter()
        .map(|c| Trajectory {
            points: (0..t).map(|j| [c[2 * j], c[2 * j + 1], times[j]]).collect(),
        })
        .collect();
    TemplateSet::new(templates)
}

fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.0 {
            best = (d, j);
        }
    }
    best.1
}

/// Index of the template closest to `expert` in L2 over `(x, y)`; ties go
/// to the lowest index.
pub fn plan_label(expert: &Trajectory, ts: &TemplateSet) -> Result<usize> {
    if expert.len() != ts.horizon() {
        return Err(CoreError::Templates(format!(
            "expert has {} points, templates have {}",
            expert.len(),
            ts.horizon()
        )));
    }
    let cs: Vec<Vec<f64>> = ts.templates.iter().map(|t| t.xy()).collect();
    Ok(nearest(&cs, &expert.xy()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostSampling {
    /// The cell containing each point.
    Nearest,
    /// Bilinear between cell centres. Not equivalent to nearest sampling.
    Bilinear,
}

/// Per template, the `(cell, weight)` pairs whose weighted sum of cost-map
/// values is the template's cost. Points off the grid contribute nothing.
pub fn template_taps(ts: &TemplateSet, spec: &BevGridSpec, sampling: CostSampling) -> Vec<Vec<(u32, f64)>> {
    let ny = spec.ny();
    ts.templates
        .iter()
        .map(|tr| {
            let mut taps = Vec::new();
            for p in &tr.points {
                match sampling {
                    CostSampling::Nearest => {
                        if let Some((ix, iy)) = spec.cell_of(p[0], p[1]) {
                            taps.push(((ix * ny + iy) as u32, 1.0));
                        }
                    }
                    CostSampling::Bilinear => {
                        let u = (p[0] - spec.x_min) / spec.cell - 0.5;
                        let v = (p[1] - spec.y_min) / spec.cell - 0.5;
                        let (u0, v0) = (u.floor(), v.floor());
                        let (fu, fv) = (u - u0, v - v0);
                        for (du, wu) in [(0.0, 1.0 - fu), (1.0, fu)] {
                            for (dv, wv) in [(0.0, 1.0 - fv), (1.0, fv)] {
                                let (iu, iv) = (u0 + du, v0 + dv);
                                if iu >= 0.0 && iv >= 0.0 && iu < spec.nx() as f64 && iv < ny as f64 && wu * wv > 0.0 {
                                    taps.push(((iu as usize * ny + iv as usize) as u32, wu * wv));
                                }
                            }
                        }
                    }
                }
            }
            taps
        })
        .collect()
}

/// Negated template costs `[B, K]` from a cost map `[B, 1, X, Y]`; their
/// softmax is the plan distribution.
pub fn score_templates<T: Float>(g: &mut Graph<T>, cost: Var, taps: &Arc<Vec<Vec<(u32, f64)>>>, spec: &BevGridSpec) -> Result<Var> {
    let s = g.shape(cost).to_vec();
    if s.len() != 4 || s[1] != 1 || s[2] != spec.nx() || s[3] != spec.ny() {
        return Err(CoreError::Shape {
            op: "score_templates",
            msg: format!("cost map {s:?} does not match a {}×{} grid", spec.nx(), spec.ny()),
        });
    }
    let flat = g.reshape(cost, &[s[0], spec.cells()])?;
    let costs = g.sparse_weighted_sum(flat, Arc::clone(taps))?;
    Ok(g.scale(costs, -1.0)?)
}

pub fn plan_distribution<T: Float>(g: &mut Graph<T>, scores: Var) -> Result<Var> {
    Ok(g.softmax(scores, 1)?)
}

/// Mean of `-log p(label)` over the batch.
pub fn planning_loss<T: Float>(g: &mut Graph<T>, scores: Var, labels: &[usize]) -> Result<Var> {
    Ok(g.cross_entropy(scores, labels)?)
}

/// Whether `label` is among the `k` highest entries of `probs`, ranking
/// ties by lower index first.
pub fn top_k_hit(probs: &[f32], label: usize, k: usize) -> bool {
    let p = probs[label];
    let rank = probs
        .iter()
        .enumerate()
        .filter(|&(j, &q)| q > p || (q == p && j < label))
        .count();
    rank < k
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(pts: &[(f64, f64)]) -> Trajectory {
        Trajectory::new(pts.iter().enumerate().map(|(i, &(x, y))| [x, y, 0.25 * (i + 1) as f64]).collect()).unwrap()
    }

    #[test]
    fn one_cluster_is_the_mean() {
        let e = vec![traj(&[(0.0, 0.0), (1.0, 0.0)]), traj(&[(2.0, 2.0), (3.0, 4.0)])];
        let ts = fit_templates(&e, 1, 0).unwrap();
        assert_eq!(ts.templates[0].points, vec![[1.0, 1.0, 0.25], [2.0, 2.0, 0.5]]);
    }

    #[test]
    fn k_equal_to_distinct_inputs_recovers_them() {
        let e: Vec<_> = (0..5).map(|i| traj(&[(i as f64 * 3.0, 0.0), (i as f64 * 3.0, 1.0)])).collect();
        let ts = fit_templates(&e, 5, 4).unwrap();
        let mut got: Vec<f64> = ts.templates.iter().map(|t| t.points[0][0]).collect();
        got.sort_by(f64::total_cmp);
        assert_eq!(got, vec![0.0, 3.0, 6.0, 9.0, 12.0]);
        assert!(fit_templates(&e, 6, 0).is_err());
    }

    #[test]
    fn label_tie_goes_to_lower_index() {
        let ts = TemplateSet::new(vec![
            traj(&[(5.0, 5.0)]),
            traj(&[(1.0, 0.0)]),
            traj(&[(9.0, 9.0)]),
            traj(&[(7.0, 7.0)]),
            traj(&[(-1.0, 0.0)]),
        ])
        .unwrap();
        assert_eq!(plan_label(&traj(&[(0.0, 0.0)]), &ts).unwrap(), 1);
        assert_eq!(plan_label(&traj(&[(7.0, 7.0)]), &ts).unwrap(), 3);
    }

    #[test]
    fn top_k_rules() {
        let p = [0.1, 0.4, 0.4, 0.1];
        assert!(top_k_hit(&p, 1, 1));
        assert!(!top_k_hit(&p, 2, 1));
        assert!(top_k_hit(&p, 2, 2));
        assert!((0..4).all(|l| top_k_hit(&p, l, 4)));
    }

    #[test]
    fn template_text_roundtrip() {
        let ts = TemplateSet::new(vec![traj(&[(0.1, 0.2), (0.3, 0.4)]), traj(&[(1.5, -2.0), (3.0, -4.25)])]).unwrap();
        assert_eq!(TemplateSet::from_text(&ts.to_text()).unwrap(), ts);
        assert!(TemplateSet::from_text("2 2\n0 0 0.25\n").is_err());
    }
}
