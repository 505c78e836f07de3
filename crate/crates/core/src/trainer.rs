//! The training loop: assembles the conditional probability-flow drift,
//! evaluates the weighted flow+score regression loss, backpropagates into
//! both networks, and applies AdamW plus the group-lasso proximal update.
//! Couplings between adjacent marginals are solved once before the loop.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bridge::{assemble_batch, make_minibatch, BridgeSample, CouplingSet};
use crate::datagen::SnapshotDataset;
use crate::nets::{
    extract_graph, group_lasso_prox, group_lasso_value, ngm_backward, ngm_forward, score_backward,
    score_forward, Activation, AdamWState, InterventionMask, NgmParams, ScoreParams,
};
use crate::numerics::{Mat, Prng};
use crate::{Result, SfkError};

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Weight of the score residual; the flow residual gets 1 - alpha.
    pub alpha: f64,
    /// Group-lasso strength; the per-step prox threshold is lr * group_lasso.
    pub group_lasso: f64,
    /// L2 penalty on all weights except graph-layer rows and biases.
    pub l2: f64,
    /// Model noise level: bridge spread, score scaling, and EOT epsilon (sigma^2).
    pub sigma: f64,
    pub t_min: f64,
    pub ngm_hidden: usize,
    pub ngm_depth: usize,
    pub score_hidden: Vec<usize>,
    pub ngm_activation: Activation,
    pub score_activation: Activation,
    pub seed: u64,
    /// Drop the score term entirely: deterministic interpolants, v_hat = v_theta.
    pub flow_only: bool,
    pub eot_max_iter: usize,
    pub eot_tol: f64,
    pub init_weight_std: f64,
    pub init_bias_std: f64,
    /// How often the last-finite model snapshot is refreshed.
    pub snapshot_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 15_000,
            batch: 64,
            lr: 3e-3,
            weight_decay: 1e-2,
            alpha: 0.1,
            group_lasso: 0.04,
            l2: 5e-6,
            sigma: 1.0,
            t_min: 0.01,
            ngm_hidden: 100,
            ngm_depth: 1,
            score_hidden: vec![100, 100],
            ngm_activation: Activation::Elu,
            score_activation: Activation::Relu,
            seed: 1,
            flow_only: false,
            eot_max_iter: 1000,
            eot_tol: 1e-6,
            init_weight_std: 0.1,
            init_bias_std: 0.01,
            snapshot_interval: 250,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(SfkError::InvalidArgument(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.sigma < 0.0 || (self.sigma == 0.0 && !self.flow_only) {
            return Err(SfkError::InvalidArgument(
                "sigma must be > 0 (sigma = 0 is only valid with flow_only)".to_string(),
            ));
        }
        if self.group_lasso < 0.0 || self.l2 < 0.0 || self.lr <= 0.0 {
            return Err(SfkError::InvalidArgument(
                "lr must be > 0 and penalties nonnegative".to_string(),
            ));
        }
        if self.batch == 0 {
            return Err(SfkError::InvalidArgument("batch must be >= 1".to_string()));
        }
        Ok(())
    }

    /// EOT regularization: sigma^2, with a small floor so the flow-only
    /// mode with sigma = 0 still has a solvable coupling problem.
    pub fn eot_epsilon(&self) -> f64 {
        if self.sigma > 0.0 {
            self.sigma * self.sigma
        } else {
            1e-2
        }
    }
}

/// A trained model: the masked drift, the conditional score, and the noise
/// level they were trained against.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub ngm: NgmParams,
    pub score: ScoreParams,
    pub sigma: f64,
    pub flow_only: bool,
}

/// Conditional probability-flow drift
/// `v_hat = v_theta(x | mask) - (sigma^2 / 2) s_phi(x, t | k)`;
/// with `flow_only` the score term is dropped.
pub fn probability_flow_drift(
    ngm: &NgmParams,
    score: &ScoreParams,
    x: &Mat,
    t: &Mat,
    mask: &InterventionMask,
    k: &Mat,
    sigma: f64,
    flow_only: bool,
) -> Result<Mat> {
    let (v, _) = ngm_forward(ngm, x, mask)?;
    if flow_only {
        return Ok(v);
    }
    let (s, _) = score_forward(score, x, t, k)?;
    let mut out = v;
    out.axpy(-(sigma * sigma) / 2.0, &s)?;
    Ok(out)
}

impl Model {
    pub fn pf_drift(&self, x: &Mat, t: &Mat, mask: &InterventionMask, k: &Mat) -> Result<Mat> {
        probability_flow_drift(&self.ngm, &self.score, x, t, mask, k, self.sigma, self.flow_only)
    }
}

/// Loss components of one step. `penalty` reports the full regularization
/// value (l2 term plus group-lasso value); only the l2 part is differentiated,
/// the group-lasso part is enforced by the prox.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub flow: f64,
    pub score: f64,
    pub penalty: f64,
    pub total: f64,
}

fn l2_terms(ngm: &NgmParams, score: &ScoreParams) -> f64 {
    let mut s = 0.0;
    for n in &ngm.nets {
        for l in &n.hidden {
            s += l.w.sq_norm();
        }
        s += n.out.w.sq_norm();
    }
    for l in &score.layers {
        s += l.w.sq_norm();
    }
    s
}

fn add_l2_gradients(ngm: &NgmParams, score: &ScoreParams, gn: &mut NgmParams, gs: &mut ScoreParams, l2: f64) {
    if l2 == 0.0 {
        return;
    }
    for (n, g) in ngm.nets.iter().zip(&mut gn.nets) {
        for (l, gl) in n.hidden.iter().zip(&mut g.hidden) {
            let _ = gl.w.axpy(2.0 * l2, &l.w);
        }
        let _ = g.out.w.axpy(2.0 * l2, &n.out.w);
    }
    for (l, gl) in score.layers.iter().zip(&mut gs.layers) {
        let _ = gl.w.axpy(2.0 * l2, &l.w);
    }
}

/// Evaluate the loss on one single-condition minibatch and return its
/// gradients with respect to both networks.
pub fn sf_loss(
    batch: &[BridgeSample],
    ngm: &NgmParams,
    score: &ScoreParams,
    mask: &InterventionMask,
    config: &TrainConfig,
) -> Result<(LossBreakdown, NgmParams, ScoreParams)> {
    if batch.is_empty() {
        return Err(SfkError::InvalidArgument("sf_loss needs a nonempty batch".to_string()));
    }
    let (x, t, k, v_tgt, s_tgt) = assemble_batch(batch, &mask.k_vector())?;
    let n = batch.len() as f64;
    let (v_theta, ngm_cache) = ngm_forward(ngm, &x, mask)?;
    let (s_phi, score_cache) = score_forward(score, &x, &t, &k)?;

    // Flow residual on the probability-flow drift.
    let mut v_hat = v_theta;
    if !config.flow_only {
        v_hat.axpy(-(config.sigma * config.sigma) / 2.0, &s_phi)?;
    }
    let mut rf = v_hat;
    rf.axpy(-1.0, &v_tgt)?;
    let mut rs = s_phi.clone();
    rs.axpy(-1.0, &s_tgt)?;
    for (i, b) in batch.iter().enumerate() {
        if rf.row(i).iter().any(|v| !v.is_finite()) || rs.row(i).iter().any(|v| !v.is_finite()) {
            return Err(SfkError::NonFinite(format!(
                "loss residual for sample {} (condition {}, segment {})",
                i, b.condition, b.segment
            )));
        }
    }
    let flow = rf.sq_norm() / n;
    let score_term = rs.sq_norm() / n;
    let l2_value = config.l2 * l2_terms(ngm, score);
    let gl_value = config.group_lasso * group_lasso_value(ngm);
    let (flow_w, score_w) = if config.flow_only {
        (1.0, 0.0)
    } else {
        (1.0 - config.alpha, config.alpha)
    };
    let total = flow_w * flow + score_w * score_term + l2_value;

    // d total / d v_theta flows through v_hat only.
    let mut up_v = rf.clone();
    up_v.scale(2.0 * flow_w / n);
    let mut gn = ngm_backward(ngm, &ngm_cache, &up_v)?;

    let mut gs = if config.flow_only {
        score.zeros_like()
    } else {
        // d total / d s_phi: the flow term via -(sigma^2/2), plus the score term.
        let mut up_s = rf;
        up_s.scale(-(config.sigma * config.sigma) / 2.0 * 2.0 * flow_w / n);
        up_s.axpy(2.0 * score_w / n, &rs)?;
        score_backward(score, &score_cache, &up_s)?
    };
    add_l2_gradients(ngm, score, &mut gn, &mut gs, config.l2);

    Ok((
        LossBreakdown {
            flow,
            score: score_term,
            penalty: l2_value + gl_value,
            total,
        },
        gn,
        gs,
    ))
}

/// Everything a run leaves behind besides the model itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub steps_run: usize,
    pub loss_flow: Vec<f64>,
    pub loss_score: Vec<f64>,
    pub loss_penalty: Vec<f64>,
    pub seconds: f64,
    pub graph: Vec<Vec<f64>>,
    /// (condition name, timepoint) marginals the run actually consumed.
    pub used_marginals: Vec<(String, usize)>,
    pub couplings_converged: bool,
    pub skipped_conditions: Vec<String>,
    /// Set when training aborted on a non-finite loss; the returned model is
    /// the last snapshot whose loss was finite.
    pub aborted: Option<String>,
}

fn graph_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// Run the full training loop on a dataset. Deterministic per (config, seed).
pub fn train(dataset: &SnapshotDataset, config: &TrainConfig) -> Result<(Model, TrainReport)> {
    config.validate()?;
    let start = Instant::now();
    let d = dataset.d;
    let master = Prng::new(config.seed);
    let mut init_rng = master.substream(&[0x11]);
    let ngm = NgmParams::init(
        d,
        config.ngm_hidden,
        config.ngm_depth,
        config.ngm_activation,
        config.init_weight_std,
        config.init_bias_std,
        &mut init_rng,
    )?;
    let score = ScoreParams::init(
        d,
        &config.score_hidden,
        config.score_activation,
        config.init_weight_std,
        config.init_bias_std,
        &mut init_rng,
    )?;
    let mut model = Model {
        ngm,
        score,
        sigma: config.sigma,
        flow_only: config.flow_only,
    };

    let couplings = CouplingSet::build(dataset, config.eot_epsilon(), config.eot_max_iter, config.eot_tol)?;
    let mut used_marginals = Vec::new();
    for &ci in &couplings.conditions() {
        for m in &dataset.conditions[ci].marginals {
            used_marginals.push((dataset.conditions[ci].name.clone(), m.timepoint));
        }
    }

    let masks: Vec<InterventionMask> = dataset
        .conditions
        .iter()
        .map(|c| InterventionMask::from_knockout(d, c.knockout))
        .collect::<Result<_>>()?;

    let lens: Vec<usize> = model
        .ngm
        .tensors()
        .iter()
        .chain(model.score.tensors().iter())
        .map(|t| t.len())
        .collect();
    let mut opt = AdamWState::new(config.lr, config.weight_decay, &lens);
    let tau = config.lr * config.group_lasso;

    let mut loss_flow = Vec::with_capacity(config.steps);
    let mut loss_score = Vec::with_capacity(config.steps);
    let mut loss_penalty = Vec::with_capacity(config.steps);
    let mut snapshot = model.clone();
    let mut aborted = None;

    for step in 0..config.steps {
        let batch = make_minibatch(
            dataset,
            &couplings,
            config.batch,
            &master,
            step as u64,
            config.t_min,
            config.sigma,
            config.flow_only,
        )?;
        let mask = &masks[batch[0].condition];
        let step_result = sf_loss(&batch, &model.ngm, &model.score, mask, config);
        let (loss, gn, gs) = match step_result {
            Ok(ok) => ok,
            Err(SfkError::NonFinite(msg)) => {
                aborted = Some(format!("non-finite loss at step {}: {}", step, msg));
                model = snapshot;
                break;
            }
            Err(e) => return Err(e),
        };
        if !loss.total.is_finite() {
            aborted = Some(format!("non-finite loss {} at step {}", loss.total, step));
            model = snapshot;
            break;
        }
        {
            let mut params = model.ngm.tensors_mut();
            params.extend(model.score.tensors_mut());
            let mut grads = gn.tensors();
            grads.extend(gs.tensors());
            opt.apply(&mut params, &grads)?;
        }
        group_lasso_prox(&mut model.ngm, tau);
        loss_flow.push(loss.flow);
        loss_score.push(loss.score);
        loss_penalty.push(loss.penalty);
        if config.snapshot_interval > 0 && (step + 1) % config.snapshot_interval == 0 {
            snapshot = model.clone();
        }
    }

    let graph = extract_graph(&model.ngm);
    let steps_run = loss_flow.len();
    let report = TrainReport {
        seed: config.seed,
        steps_run,
        loss_flow,
        loss_score,
        loss_penalty,
        seconds: start.elapsed().as_secs_f64(),
        graph: graph_rows(&graph),
        used_marginals,
        couplings_converged: couplings.all_converged,
        skipped_conditions: couplings.skipped.clone(),
        aborted,
    };
    Ok((model, report))
}

/// Versioned checkpoint: model weights, optimizer state, step counter.
/// JSON floats use shortest round-trip formatting, so weights survive a
/// write/read cycle bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub lib_version: String,
    pub d: usize,
    pub h: usize,
    pub depth: usize,
    pub step: u64,
    pub model: Model,
    pub optimizer: Option<AdamWState>,
}

impl Checkpoint {
    pub fn new(model: &Model, optimizer: Option<AdamWState>, step: u64) -> Self {
        Checkpoint {
            format_version: 1,
            lib_version: crate::VERSION.to_string(),
            d: model.ngm.d,
            h: model.ngm.h,
            depth: model.ngm.depth,
            step,
            model: model.clone(),
            optimizer,
        }
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let text = serde_json::to_string(ckpt)
        .map_err(|e| SfkError::InvalidArgument(format!("checkpoint serialization failed: {}", e)))?;
    fs::write(path, text).map_err(|e| SfkError::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| SfkError::io(path.display().to_string(), e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| SfkError::Parse {
        path: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    if ckpt.format_version != 1 {
        return Err(SfkError::InvalidArgument(format!(
            "unsupported checkpoint version {}",
            ckpt.format_version
        )));
    }
    Ok(ckpt)
}
