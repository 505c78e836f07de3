//! Simulation-free training targets: sample a time and a Brownian-bridge
//! point between coupled snapshot endpoints, and evaluate the closed-form
//! conditional flow and score regression targets.
//!
//! Adjacent retained marginals are treated as unit-length segments; the
//! global time fed to the score network is `segment index + local time`.

use rayon::prelude::*;

use crate::datagen::SnapshotDataset;
use crate::eot::{sinkhorn, CouplingSampler};
use crate::numerics::{Mat, Prng};
use crate::{Result, SfkError};

/// One regression target tuple consumed by the loss.
#[derive(Debug, Clone)]
pub struct BridgeSample {
    pub t_local: f64,
    pub t_global: f64,
    pub x_t: Vec<f64>,
    pub v_target: Vec<f64>,
    pub s_target: Vec<f64>,
    /// Index into the dataset's condition list.
    pub condition: usize,
    pub segment: usize,
}

/// x_t = t x1 + (1-t) x0 + sigma sqrt(t(1-t)) xi with xi ~ N(0, I).
/// sigma = 0 degenerates to the linear interpolation.
pub fn sample_bridge_point(
    x0: &[f64],
    x1: &[f64],
    t: f64,
    sigma: f64,
    prng: &mut Prng,
) -> Result<Vec<f64>> {
    if !(t > 0.0 && t < 1.0) {
        return Err(SfkError::InvalidArgument(format!(
            "bridge time t={} outside the open interval (0, 1)",
            t
        )));
    }
    if x0.len() != x1.len() {
        return Err(SfkError::shape(
            "sample_bridge_point",
            format!("{} vs {}", x0.len(), x1.len()),
        ));
    }
    let spread = sigma * (t * (1.0 - t)).sqrt();
    Ok(x0
        .iter()
        .zip(x1)
        .map(|(&a, &b)| t * b + (1.0 - t) * a + spread * prng.gauss())
        .collect())
}

/// Closed-form conditional probability-flow and score targets of the
/// Brownian bridge pinned at (x0, x1):
///
///   v(x) = ((1-2t)/(t(1-t))) (x - (t x1 + (1-t) x0)) + (x1 - x0)
///   s(x) = (t x1 + (1-t) x0 - x) / (sigma^2 t (1-t))
pub fn bridge_targets(
    x0: &[f64],
    x1: &[f64],
    x_t: &[f64],
    t: f64,
    sigma: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if sigma <= 0.0 {
        return Err(SfkError::InvalidArgument(format!(
            "bridge_targets needs sigma > 0, got {}",
            sigma
        )));
    }
    let tt = t * (1.0 - t);
    if tt < 1e-12 {
        return Err(SfkError::InvalidArgument(format!(
            "t(1-t) = {} below floor; clamp t away from the endpoints",
            tt
        )));
    }
    if x0.len() != x1.len() || x0.len() != x_t.len() {
        return Err(SfkError::shape(
            "bridge_targets",
            format!("{}/{}/{}", x0.len(), x1.len(), x_t.len()),
        ));
    }
    let flow_coef = (1.0 - 2.0 * t) / tt;
    let score_denom = sigma * sigma * tt;
    let mut v = Vec::with_capacity(x0.len());
    let mut s = Vec::with_capacity(x0.len());
    for i in 0..x0.len() {
        let mean = t * x1[i] + (1.0 - t) * x0[i];
        v.push(flow_coef * (x_t[i] - mean) + (x1[i] - x0[i]));
        s.push((mean - x_t[i]) / score_denom);
    }
    Ok((v, s))
}

/// Couplings for every usable (condition, adjacent-segment) pair of a
/// dataset, with precomputed samplers. Conditions with fewer than two
/// marginals are excluded and reported in `skipped`.
pub struct CouplingSet {
    entries: Vec<CouplingEntry>,
    pub all_converged: bool,
    pub skipped: Vec<String>,
}

struct CouplingEntry {
    condition: usize,
    samplers: Vec<CouplingSampler>,
}

impl CouplingSet {
    pub fn build(
        dataset: &SnapshotDataset,
        epsilon: f64,
        max_iter: usize,
        tol: f64,
    ) -> Result<CouplingSet> {
        let mut skipped = Vec::new();
        let mut jobs: Vec<(usize, usize)> = Vec::new();
        for (ci, cond) in dataset.conditions.iter().enumerate() {
            if cond.marginals.len() < 2 {
                skipped.push(cond.name.clone());
                continue;
            }
            for s in 0..cond.marginals.len() - 1 {
                jobs.push((ci, s));
            }
        }
        if jobs.is_empty() {
            return Err(SfkError::InvalidArgument(
                "no condition has at least two marginals".to_string(),
            ));
        }
        let solved: Vec<((usize, usize), (CouplingSampler, bool))> = jobs
            .par_iter()
            .map(|&(ci, s)| {
                let cond = &dataset.conditions[ci];
                let c = sinkhorn(
                    &cond.marginals[s].samples,
                    &cond.marginals[s + 1].samples,
                    epsilon,
                    max_iter,
                    tol,
                )?;
                Ok(((ci, s), (CouplingSampler::new(&c), c.converged)))
            })
            .collect::<Result<_>>()?;
        let all_converged = solved.iter().all(|(_, (_, ok))| *ok);
        let mut entries: Vec<CouplingEntry> = Vec::new();
        for ((ci, _), (sampler, _)) in solved {
            match entries.iter_mut().find(|e| e.condition == ci) {
                Some(e) => e.samplers.push(sampler),
                None => entries.push(CouplingEntry {
                    condition: ci,
                    samplers: vec![sampler],
                }),
            }
        }
        Ok(CouplingSet {
            entries,
            all_converged,
            skipped,
        })
    }

    /// Condition indices with usable couplings.
    pub fn conditions(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.condition).collect()
    }
}

/// Draw one minibatch of bridge samples. A single condition is sampled
/// uniformly per call; each element then draws a segment, a coupled
/// endpoint pair, and a local time from its own substream keyed by
/// (seed, step, element), so parallel and serial schedules agree.
pub fn make_minibatch(
    dataset: &SnapshotDataset,
    couplings: &CouplingSet,
    batch: usize,
    base: &Prng,
    step: u64,
    t_min: f64,
    sigma: f64,
    flow_only: bool,
) -> Result<Vec<BridgeSample>> {
    if batch == 0 {
        return Err(SfkError::InvalidArgument("batch must be >= 1".to_string()));
    }
    if !(0.0..0.5).contains(&t_min) {
        return Err(SfkError::InvalidArgument(format!("t_min {} outside [0, 0.5)", t_min)));
    }
    let mut cond_rng = base.substream(&[0x5B, step]);
    let entry = &couplings.entries[cond_rng.index(couplings.entries.len())];
    let cond = &dataset.conditions[entry.condition];
    let mut out = Vec::with_capacity(batch);
    for e in 0..batch {
        let mut rng = base.substream(&[0x5C, step, e as u64]);
        let seg = rng.index(entry.samplers.len());
        let (i, j) = entry.samplers[seg].draw(&mut rng);
        let x0 = cond.marginals[seg].samples.row(i);
        let x1 = cond.marginals[seg + 1].samples.row(j);
        let t = rng.uniform_range(t_min.max(1e-9), 1.0 - t_min.max(1e-9));
        let (x_t, v, s) = if flow_only {
            let x_t: Vec<f64> = x0
                .iter()
                .zip(x1)
                .map(|(&a, &b)| t * b + (1.0 - t) * a)
                .collect();
            let v: Vec<f64> = x0.iter().zip(x1).map(|(&a, &b)| b - a).collect();
            (x_t, v, vec![0.0; x0.len()])
        } else {
            let x_t = sample_bridge_point(x0, x1, t, sigma, &mut rng)?;
            let (v, s) = bridge_targets(x0, x1, &x_t, t, sigma)?;
            (x_t, v, s)
        };
        out.push(BridgeSample {
            t_local: t,
            t_global: seg as f64 + t,
            x_t,
            v_target: v,
            s_target: s,
            condition: entry.condition,
            segment: seg,
        });
    }
    Ok(out)
}

/// Stack a minibatch into the matrices consumed by the networks:
/// (x, t_global column, k rows, v targets, s targets).
pub fn assemble_batch(batch: &[BridgeSample], k_row: &[f64]) -> Result<(Mat, Mat, Mat, Mat, Mat)> {
    if batch.is_empty() {
        return Err(SfkError::InvalidArgument("empty minibatch".to_string()));
    }
    let n = batch.len();
    let d = batch[0].x_t.len();
    let mut x = Mat::zeros(n, d);
    let mut t = Mat::zeros(n, 1);
    let mut k = Mat::zeros(n, d);
    let mut v = Mat::zeros(n, d);
    let mut s = Mat::zeros(n, d);
    for (r, b) in batch.iter().enumerate() {
        x.row_mut(r).copy_from_slice(&b.x_t);
        t.set(r, 0, b.t_global);
        k.row_mut(r).copy_from_slice(k_row);
        v.row_mut(r).copy_from_slice(&b.v_target);
        s.row_mut(r).copy_from_slice(&b.s_target);
    }
    Ok((x, t, k, v, s))
}
