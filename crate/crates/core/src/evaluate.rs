//! Sample clustering and the metric suite for joint prediction and
//! controllable generation.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::guidance::RouteTask;
use crate::rng::{rng_from_seed, standard_normal};
use crate::scenario::MarginalSampleSet;
use crate::stats::Vector;

/// Default group merge threshold (distance units).
pub const MERGE_THRESHOLD: f64 = 2.5;
/// Endpoint error above which an agent counts as missed.
pub const MISS_THRESHOLD: f64 = 2.0;
pub const AGENT_RADIUS: f64 = 0.5;
pub const SW_PROJECTIONS: usize = 100;

fn point(x: &Vector, horizon: usize, agent: usize, h: usize) -> [f64; 2] {
    let k = agent * 2 * horizon + 2 * h;
    [x[k], x[k + 1]]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn layout(dim: usize, n_agents: usize) -> Result<usize> {
    if n_agents == 0 || dim == 0 || !dim.is_multiple_of(2 * n_agents) {
        return Err(Error::DimensionMismatch { expected: 2 * n_agents.max(1), got: dim });
    }
    Ok(dim / (2 * n_agents))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub representatives: Vec<Vector>,
    pub probabilities: Vec<f64>,
    pub member_counts: Vec<usize>,
    /// Reference-index combination that names each group.
    pub centers: Vec<Vec<usize>>,
}

/// Groups joint samples by their nearest reference combination and merges
/// groups whose centers nearly coincide.
pub fn cluster_samples(samples: &[Vector], refs: &MarginalSampleSet, threshold: f64) -> Result<ClusterResult> {
    if samples.is_empty() {
        return Err(Error::NoSamples);
    }
    if !(threshold > 0.0) {
        return Err(Error::InvalidConfig("merge threshold must be positive".into()));
    }
    let n = refs.n_agents();
    let horizon = layout(samples[0].len(), n)?;
    let ends: Vec<Vec<[f64; 2]>> = refs
        .entries
        .iter()
        .map(|e| {
            if e.samples.is_empty() {
                return Err(Error::NoSamples);
            }
            e.samples
                .iter()
                .map(|r| {
                    check_dim(2 * horizon, r.len())?;
                    Ok(point(r, horizon, 0, horizon - 1))
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut groups: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
    for (s, x) in samples.iter().enumerate() {
        check_dim(samples[0].len(), x.len())?;
        let key: Vec<usize> = (0..n)
            .map(|i| {
                let e = point(x, horizon, i, horizon - 1);
                let mut best = (0, f64::INFINITY);
                for (l, r) in ends[i].iter().enumerate() {
                    let d = dist(e, *r);
                    if d < best.1 {
                        best = (l, d);
                    }
                }
                best.0
            })
            .collect();
        groups.entry(key).or_default().push(s);
    }

    let mut list: Vec<(Vec<usize>, Vec<usize>)> = groups.into_iter().collect();
    // stable sort keeps the key order among equal sizes
    let sort = |l: &mut Vec<(Vec<usize>, Vec<usize>)>| l.sort_by_key(|e| std::cmp::Reverse(e.1.len()));
    sort(&mut list);
    let deviation =
        |a: &[usize], b: &[usize]| (0..n).map(|i| dist(ends[i][a[i]], ends[i][b[i]])).fold(0.0, f64::max);
    'merge: loop {
        for a in 0..list.len() {
            for b in a + 1..list.len() {
                if deviation(&list[a].0, &list[b].0) < threshold {
                    let (_, members) = list.remove(b);
                    list[a].1.extend(members);
                    sort(&mut list);
                    continue 'merge;
                }
            }
        }
        break;
    }

    let total = samples.len() as f64;
    let mut out = ClusterResult { representatives: vec![], probabilities: vec![], member_counts: vec![], centers: vec![] };
    for (key, mut members) in list {
        members.sort_unstable();
        let mut mean = Vector::zeros(samples[0].len());
        for &m in &members {
            mean += &samples[m];
        }
        mean /= members.len() as f64;
        out.representatives.push(mean);
        out.probabilities.push(members.len() as f64 / total);
        out.member_counts.push(members.len());
        out.centers.push(key);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionMetrics {
    pub k: usize,
    pub avg_min_ade: f64,
    pub avg_min_fde: f64,
    pub actor_mr: f64,
    pub actor_cr: f64,
    /// `minFDE + (1 − p̂)²`.
    pub avg_brier_min_fde: f64,
    /// `minFDE · (1 + (1 − p̂)²)`, the multiplicative reading.
    pub avg_brier_min_fde_mult: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllableMetrics {
    pub min_jfde: f64,
    pub mean_jfde: f64,
    pub min_jrde: f64,
    pub mean_jrde: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub prediction: Option<PredictionMetrics>,
    pub controllable: Option<ControllableMetrics>,
}

impl MetricsReport {
    /// Flat `(key, value)` pairs for table rows.
    pub fn to_kv(&self) -> Vec<(String, f64)> {
        let mut kv = Vec::new();
        if let Some(p) = &self.prediction {
            let k = p.k;
            kv.push((format!("avgMinADE_{k}"), p.avg_min_ade));
            kv.push((format!("avgMinFDE_{k}"), p.avg_min_fde));
            kv.push((format!("actorMR_{k}"), p.actor_mr));
            kv.push((format!("actorCR_{k}"), p.actor_cr));
            kv.push((format!("avgBrierMinFDE_{k}"), p.avg_brier_min_fde));
            kv.push((format!("avgBrierMinFDEMult_{k}"), p.avg_brier_min_fde_mult));
        }
        if let Some(c) = &self.controllable {
            kv.push(("minJFDE".into(), c.min_jfde));
            kv.push(("meanJFDE".into(), c.mean_jfde));
            kv.push(("minJRDE".into(), c.min_jrde));
            kv.push(("meanJRDE".into(), c.mean_jrde));
        }
        kv
    }
}

/// Prediction metrics of `preds` (with probabilities) against one joint ground truth.
pub fn joint_prediction_metrics(preds: &[Vector], probs: &[f64], gt: &Vector, n_agents: usize) -> Result<PredictionMetrics> {
    if preds.is_empty() {
        return Err(Error::NoSamples);
    }
    check_dim(preds.len(), probs.len())?;
    let horizon = layout(gt.len(), n_agents)?;
    let per_agent_fde = |x: &Vector| -> Vec<f64> {
        (0..n_agents).map(|i| dist(point(x, horizon, i, horizon - 1), point(gt, horizon, i, horizon - 1))).collect()
    };
    let mut best = (0, f64::INFINITY);
    let mut min_ade = f64::INFINITY;
    for (s, x) in preds.iter().enumerate() {
        check_dim(gt.len(), x.len())?;
        let fde = per_agent_fde(x).iter().sum::<f64>() / n_agents as f64;
        if fde < best.1 {
            best = (s, fde);
        }
        let mut ade = 0.0;
        for i in 0..n_agents {
            for h in 0..horizon {
                ade += dist(point(x, horizon, i, h), point(gt, horizon, i, h));
            }
        }
        min_ade = min_ade.min(ade / (n_agents * horizon) as f64);
    }
    let x = &preds[best.0];
    let missed = per_agent_fde(x).iter().filter(|&&d| d > MISS_THRESHOLD).count();
    let colliding = (0..n_agents)
        .filter(|&i| {
            (0..n_agents).any(|j| {
                j != i && (0..horizon).any(|h| dist(point(x, horizon, i, h), point(x, horizon, j, h)) < 2.0 * AGENT_RADIUS)
            })
        })
        .count();
    let miss_p = (1.0 - probs[best.0]).powi(2);
    Ok(PredictionMetrics {
        k: preds.len(),
        avg_min_ade: min_ade,
        avg_min_fde: best.1,
        actor_mr: missed as f64 / n_agents as f64,
        actor_cr: colliding as f64 / n_agents as f64,
        avg_brier_min_fde: best.1 + miss_p,
        avg_brier_min_fde_mult: best.1 * (1.0 + miss_p),
    })
}

/// Distance from `p` to the polyline through `pts`, by segment projection.
pub fn polyline_distance(p: [f64; 2], pts: &[[f64; 2]]) -> f64 {
    if pts.len() == 1 {
        return dist(p, pts[0]);
    }
    pts.windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            let d = [b[0] - a[0], b[1] - a[1]];
            let len2 = d[0] * d[0] + d[1] * d[1];
            let t = if len2 > 0.0 { (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
            dist(p, [a[0] + t * d[0], a[1] + t * d[1]])
        })
        .fold(f64::INFINITY, f64::min)
}

/// Per-sample `(JFDE, JRDE)`.
pub fn sample_route_errors(x: &Vector, task: &RouteTask) -> Result<(f64, f64)> {
    let n = task.n_agents();
    let h = task.horizon;
    check_dim(2 * n * h, x.len())?;
    let mut jfde = 0.0;
    let mut jrde = 0.0;
    for i in 0..n {
        jfde += dist(point(x, h, i, task.tau_d - 1), task.goal(i));
        for k in 0..h {
            jrde += polyline_distance(point(x, h, i, k), &task.routes[i]);
        }
    }
    Ok((jfde / n as f64, jrde / (n * h) as f64))
}

pub fn controllable_metrics(samples: &[Vector], task: &RouteTask) -> Result<ControllableMetrics> {
    if samples.is_empty() {
        return Err(Error::NoSamples);
    }
    let errs: Vec<(f64, f64)> = samples.iter().map(|x| sample_route_errors(x, task)).collect::<Result<_>>()?;
    let n = errs.len() as f64;
    Ok(ControllableMetrics {
        min_jfde: errs.iter().map(|e| e.0).fold(f64::INFINITY, f64::min),
        mean_jfde: errs.iter().map(|e| e.0).sum::<f64>() / n,
        min_jrde: errs.iter().map(|e| e.1).fold(f64::INFINITY, f64::min),
        mean_jrde: errs.iter().map(|e| e.1).sum::<f64>() / n,
    })
}

/// Exact 1-D Wasserstein-1 distance between two empirical distributions.
pub fn wasserstein_1d(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        return a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    }
    // integrate |F_a⁻¹(u) − F_b⁻¹(u)| over the merged quantile breakpoints
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < na && j < nb {
        let ua = (i + 1) as f64 / na as f64;
        let ub = (j + 1) as f64 / nb as f64;
        let next = ua.min(ub);
        total += (next - u) * (a[i] - b[j]).abs();
        u = next;
        if ua <= next {
            i += 1;
        }
        if ub <= next {
            j += 1;
        }
    }
    total
}

/// Sliced Wasserstein-1: the average 1-D distance over `n_proj` random unit directions.
pub fn sliced_wasserstein(a: &[Vector], b: &[Vector], n_proj: usize, seed: u64) -> Result<f64> {
    if a.is_empty() || b.is_empty() || n_proj == 0 {
        return Err(Error::NoSamples);
    }
    let d = a[0].len();
    for x in a.iter().chain(b) {
        check_dim(d, x.len())?;
    }
    let mut rng = rng_from_seed(seed);
    let dirs: Vec<Vector> = (0..n_proj)
        .map(|_| {
            let v = standard_normal(&mut rng, d);
            let norm = v.norm();
            v / norm
        })
        .collect();
    let sum: f64 = dirs
        .par_iter()
        .map(|u| {
            let mut pa: Vec<f64> = a.iter().map(|x| x.dot(u)).collect();
            let mut pb: Vec<f64> = b.iter().map(|x| x.dot(u)).collect();
            wasserstein_1d(&mut pa, &mut pb)
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    Ok(sum / n_proj as f64)
}
