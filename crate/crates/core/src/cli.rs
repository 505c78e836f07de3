//! Batch experiment front-end: data generation, training, the two held-out
//! evaluation protocols, and structure scoring. Commands read a flat
//! sectioned `key=value` config file, apply `--set section.key=value`
//! overrides, and write CSV + JSON artifacts under the output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline_ou::{fit_reference, ou_graph, ou_rollout, OuModel, RfOptions, RfReport};
use crate::datagen::{
    dataset_digest, generate_dataset, read_dataset, read_matrix_csv, write_dataset, write_matrix_csv,
    GeneratorParams, SnapshotDataset,
};
use crate::metrics::{
    energy_distance, mmd2, structure_scores, w2, MetricOptions, MetricReport, StructureScore,
};
use crate::nets::{Activation, InterventionMask};
use crate::numerics::{Mat, Prng};
use crate::rollout::{rollout_ode, RolloutConfig};
use crate::trainer::{save_checkpoint, train, Checkpoint, Model, TrainConfig, TrainReport};
use crate::{Result, SfkError};

#[derive(Parser, Debug)]
#[command(name = "sfk", version, about = "Joint structure and population-dynamics learning from snapshot data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic linear snapshot dataset.
    Generate(CommonArgs),
    /// Train the joint model, one run per seed.
    Train(CommonArgs),
    /// Leave-one-timepoint-out evaluation.
    Loto(CommonArgs),
    /// Leave-one-knockout-out evaluation.
    Loko(CommonArgs),
    /// Score a predicted graph CSV against a ground-truth CSV.
    #[command(name = "eval-structure")]
    EvalStructure(CommonArgs),
    /// Train the linear reference-fitting baseline.
    Rf(CommonArgs),
}

#[derive(Args, Debug, Default)]
pub struct CommonArgs {
    /// Config file (flat sections of key=value lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config value: --set section.key=value (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory (equivalent to --set output.dir=DIR).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Flat sectioned key=value configuration.
#[derive(Debug, Clone, Default)]
pub struct Config {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl Config {
    pub fn parse(text: &str, path: &str) -> Result<Config> {
        let mut cfg = Config::default();
        let mut section = String::from("");
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| SfkError::Parse {
                    path: path.to_string(),
                    line: ln + 1,
                    msg: "unterminated section header".to_string(),
                })?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| SfkError::Parse {
                path: path.to_string(),
                line: ln + 1,
                msg: format!("expected key=value, got '{}'", line),
            })?;
            cfg.sections
                .entry(section.clone())
                .or_default()
                .insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Config> {
        let text = fs::read_to_string(path).map_err(|e| SfkError::io(path.display().to_string(), e))?;
        Config::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.to_string());
    }

    /// Apply one `section.key=value` override.
    pub fn apply_set(&mut self, spec: &str) -> Result<()> {
        let (path, value) = spec
            .split_once('=')
            .ok_or_else(|| SfkError::Usage(format!("--set expects SECTION.KEY=VALUE, got '{}'", spec)))?;
        let (section, key) = path
            .split_once('.')
            .ok_or_else(|| SfkError::Usage(format!("--set key '{}' must be SECTION.KEY", path)))?;
        self.set(section.trim(), key.trim(), value.trim());
        Ok(())
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section).and_then(|s| s.get(key)).map(|s| s.as_str())
    }

    fn parse_value<T: std::str::FromStr>(&self, section: &str, key: &str, default: T) -> Result<T> {
        match self.get(section, key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|_| {
                SfkError::Usage(format!("config {}.{}: cannot parse '{}'", section, key, raw))
            }),
        }
    }

    pub fn get_f64(&self, section: &str, key: &str, default: f64) -> Result<f64> {
        self.parse_value(section, key, default)
    }

    pub fn get_usize(&self, section: &str, key: &str, default: usize) -> Result<usize> {
        self.parse_value(section, key, default)
    }

    pub fn get_u64(&self, section: &str, key: &str, default: u64) -> Result<u64> {
        self.parse_value(section, key, default)
    }

    pub fn get_bool(&self, section: &str, key: &str, default: bool) -> Result<bool> {
        match self.get(section, key) {
            None => Ok(default),
            Some("true") | Some("1") | Some("yes") => Ok(true),
            Some("false") | Some("0") | Some("no") => Ok(false),
            Some(raw) => Err(SfkError::Usage(format!(
                "config {}.{}: expected boolean, got '{}'",
                section, key, raw
            ))),
        }
    }

    pub fn get_string(&self, section: &str, key: &str, default: &str) -> String {
        self.get(section, key).unwrap_or(default).to_string()
    }

    pub fn get_list<T: std::str::FromStr>(&self, section: &str, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.get(section, key) {
            None => Ok(default),
            Some("") => Ok(Vec::new()),
            Some(raw) => raw
                .split(',')
                .map(|p| {
                    p.trim().parse().map_err(|_| {
                        SfkError::Usage(format!("config {}.{}: cannot parse '{}'", section, key, p))
                    })
                })
                .collect(),
        }
    }

    /// Canonical rendering: sections and keys sorted.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (section, entries) in &self.sections {
            out.push_str(&format!("[{}]\n", section));
            for (k, v) in entries {
                out.push_str(&format!("{}={}\n", k, v));
            }
        }
        out
    }

    pub fn digest(&self) -> String {
        crate::datagen::hex_string(&Sha256::digest(self.render().as_bytes()))
    }
}

fn load_config(args: &CommonArgs) -> Result<Config> {
    let mut cfg = match &args.config {
        Some(path) => Config::from_file(path)?,
        None => Config::default(),
    };
    for spec in &args.set {
        cfg.apply_set(spec)?;
    }
    if let Some(out) = &args.out {
        cfg.set("output", "dir", &out.display().to_string());
    }
    Ok(cfg)
}

fn out_dir(cfg: &Config) -> PathBuf {
    PathBuf::from(cfg.get_string("output", "dir", "sfk_out"))
}

fn generator_params(cfg: &Config) -> Result<GeneratorParams> {
    let defaults = GeneratorParams::default();
    let params = GeneratorParams {
        d: cfg.get_usize("data", "d", defaults.d)?,
        sparsity: cfg.get_f64("data", "sparsity", defaults.sparsity)?,
        timepoints: cfg.get_usize("data", "timepoints", defaults.timepoints)?,
        samples: cfg.get_usize("data", "samples", defaults.samples)?,
        sigma: cfg.get_f64("data", "sigma", defaults.sigma)?,
        horizon: cfg.get_f64("data", "horizon", defaults.horizon)?,
        dt: cfg.get_f64("data", "dt", defaults.dt)?,
        damping: cfg.get_bool("data", "damping", defaults.damping)?,
        knockouts: cfg.get_list("data", "knockouts", defaults.knockouts.clone())?,
        seed: cfg.get_u64("data", "seed", defaults.seed)?,
    };
    if !(0.0..=1.0).contains(&params.sparsity) {
        return Err(SfkError::Usage(format!(
            "data.sparsity {} outside [0, 1]",
            params.sparsity
        )));
    }
    if params.timepoints < 2 {
        return Err(SfkError::Usage("data.timepoints must be >= 2".to_string()));
    }
    Ok(params)
}

/// Build a [`TrainConfig`] from the `[train]` section, with the given seed.
pub fn train_config(cfg: &Config, seed: u64) -> Result<TrainConfig> {
    let defaults = TrainConfig::default();
    let ngm_activation: Activation = cfg.get_string("train", "ngm_activation", "elu").parse()?;
    let score_activation: Activation = cfg.get_string("train", "score_activation", "relu").parse()?;
    Ok(TrainConfig {
        steps: cfg.get_usize("train", "steps", defaults.steps)?,
        batch: cfg.get_usize("train", "batch", defaults.batch)?,
        lr: cfg.get_f64("train", "lr", defaults.lr)?,
        weight_decay: cfg.get_f64("train", "weight_decay", defaults.weight_decay)?,
        alpha: cfg.get_f64("train", "alpha", defaults.alpha)?,
        group_lasso: cfg.get_f64("train", "group_lasso", defaults.group_lasso)?,
        l2: cfg.get_f64("train", "l2", defaults.l2)?,
        sigma: cfg.get_f64("train", "sigma", defaults.sigma)?,
        t_min: cfg.get_f64("train", "t_min", defaults.t_min)?,
        ngm_hidden: cfg.get_usize("train", "ngm_hidden", defaults.ngm_hidden)?,
        ngm_depth: cfg.get_usize("train", "ngm_depth", defaults.ngm_depth)?,
        score_hidden: cfg.get_list("train", "score_hidden", defaults.score_hidden.clone())?,
        ngm_activation,
        score_activation,
        seed,
        flow_only: cfg.get_bool("train", "flow_only", defaults.flow_only)?,
        eot_max_iter: cfg.get_usize("train", "eot_max_iter", defaults.eot_max_iter)?,
        eot_tol: cfg.get_f64("train", "eot_tol", defaults.eot_tol)?,
        init_weight_std: cfg.get_f64("train", "init_weight_std", defaults.init_weight_std)?,
        init_bias_std: cfg.get_f64("train", "init_bias_std", defaults.init_bias_std)?,
        snapshot_interval: cfg.get_usize("train", "snapshot_interval", defaults.snapshot_interval)?,
    })
}

fn rf_options(cfg: &Config) -> Result<RfOptions> {
    let defaults = RfOptions::default();
    Ok(RfOptions {
        sigma: cfg.get_f64("rf", "sigma", defaults.sigma)?,
        ridge: cfg.get_f64("rf", "ridge", defaults.ridge)?,
        outer_iters: cfg.get_usize("rf", "outer_iters", defaults.outer_iters)?,
        eot_max_iter: cfg.get_usize("rf", "eot_max_iter", defaults.eot_max_iter)?,
        eot_tol: cfg.get_f64("rf", "eot_tol", defaults.eot_tol)?,
    })
}

fn metric_options(cfg: &Config) -> Result<MetricOptions> {
    let defaults = MetricOptions::default();
    Ok(MetricOptions {
        subsample_cap: cfg.get_usize("eval", "subsample_cap", defaults.subsample_cap)?,
        seed: cfg.get_u64("eval", "metric_seed", defaults.seed)?,
        report_squared: cfg.get_bool("eval", "report_squared", defaults.report_squared)?,
    })
}

fn seeds(cfg: &Config, default: &[u64]) -> Result<Vec<u64>> {
    let s = cfg.get_list("train", "seeds", default.to_vec())?;
    if s.is_empty() {
        return Err(SfkError::Usage("train.seeds must be nonempty".to_string()));
    }
    Ok(s)
}

/// Load the dataset named by `data.path`, or generate one in memory from the
/// `[data]` section when no path is given.
fn load_or_generate(cfg: &Config) -> Result<SnapshotDataset> {
    match cfg.get("data", "path") {
        Some(path) => read_dataset(Path::new(path)),
        None => generate_dataset(&generator_params(cfg)?),
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| SfkError::io(path.display().to_string(), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| SfkError::InvalidArgument(format!("serialization failed: {}", e)))?;
    fs::write(path, text).map_err(|e| SfkError::io(path.display().to_string(), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| SfkError::io(path.display().to_string(), e))
}

pub fn cmd_generate(cfg: &Config) -> Result<()> {
    let params = generator_params(cfg)?;
    let dataset = generate_dataset(&params)?;
    let dir = out_dir(cfg);
    write_dataset(&dataset, &dir)?;
    let digest = dataset_digest(&dir)?;
    println!(
        "generate: wrote {} conditions x {} timepoints (d={}) to {}",
        dataset.conditions.len(),
        dataset.timepoints,
        dataset.d,
        dir.display()
    );
    println!("dataset_digest={}", digest);
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct SeedScore {
    seed: u64,
    auroc: f64,
    ap: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainSummary {
    method: String,
    version: String,
    config_digest: String,
    seeds: Vec<u64>,
    flow_only: bool,
    auroc_mean: Option<f64>,
    auroc_std: Option<f64>,
    ap_mean: Option<f64>,
    ap_std: Option<f64>,
    per_seed: Vec<SeedScore>,
}

#[derive(Debug, Serialize)]
struct TrainRunReport<'a> {
    method: &'a str,
    version: &'a str,
    config_digest: &'a str,
    seed: u64,
    flow_only: bool,
    structure: Option<StructureScore>,
    checkpoint: String,
    #[serde(flatten)]
    train: &'a TrainReport,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn trace_csv(report: &TrainReport) -> String {
    let mut out = String::from("step,loss_flow,loss_score,penalty\n");
    for i in 0..report.loss_flow.len() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            i, report.loss_flow[i], report.loss_score[i], report.loss_penalty[i]
        ));
    }
    out
}

fn graph_to_mat(rows: &[Vec<f64>]) -> Result<Mat> {
    Mat::from_rows(rows)
}

/// One full training run per seed plus a mean/std summary of structure
/// scores when the dataset carries a ground-truth graph.
pub fn cmd_train(cfg: &Config, method: &str) -> Result<()> {
    let dataset = load_or_generate(cfg)?;
    let dir = out_dir(cfg);
    ensure_dir(&dir)?;
    let digest = cfg.digest();
    let seed_list = seeds(cfg, &[1, 2, 3, 4, 5])?;
    let mut scores: Vec<SeedScore> = Vec::new();
    let mut flow_only = false;
    for &seed in &seed_list {
        let run_dir = dir.join(format!("seed_{}", seed));
        ensure_dir(&run_dir)?;
        let graph = match method {
            "sf" => {
                let config = train_config(cfg, seed)?;
                flow_only = config.flow_only;
                let (model, report) = train(&dataset, &config)?;
                if let Some(reason) = &report.aborted {
                    return Err(SfkError::Diverged(format!("seed {}: {}", seed, reason)));
                }
                let ckpt_path = run_dir.join("checkpoint.json");
                save_checkpoint(&ckpt_path, &Checkpoint::new(&model, None, report.steps_run as u64))?;
                write_text(&run_dir.join("trace.csv"), &trace_csv(&report))?;
                let graph = graph_to_mat(&report.graph)?;
                write_matrix_csv(&run_dir.join("graph.csv"), &graph)?;
                let structure = match &dataset.graph {
                    Some(truth) => Some(structure_scores(&graph, truth)?),
                    None => None,
                };
                write_json(
                    &run_dir.join("report.json"),
                    &TrainRunReport {
                        method,
                        version: crate::VERSION,
                        config_digest: &digest,
                        seed,
                        flow_only: config.flow_only,
                        structure,
                        checkpoint: ckpt_path.display().to_string(),
                        train: &report,
                    },
                )?;
                if let Some(s) = structure {
                    scores.push(SeedScore {
                        seed,
                        auroc: s.auroc,
                        ap: s.ap,
                    });
                }
                graph
            }
            "rf" => {
                let opts = rf_options(cfg)?;
                let (model, report) = fit_reference(&dataset, &opts)?;
                let graph = ou_graph(&model);
                write_matrix_csv(&run_dir.join("graph.csv"), &graph)?;
                let structure = match &dataset.graph {
                    Some(truth) => Some(structure_scores(&graph, truth)?),
                    None => None,
                };
                write_json(
                    &run_dir.join("report.json"),
                    &RfRunReport {
                        method: "rf-baseline",
                        version: crate::VERSION,
                        config_digest: &digest,
                        seed,
                        structure,
                        model: &model,
                        report: &report,
                    },
                )?;
                if let Some(s) = structure {
                    scores.push(SeedScore {
                        seed,
                        auroc: s.auroc,
                        ap: s.ap,
                    });
                }
                graph
            }
            other => return Err(SfkError::Usage(format!("unknown method '{}'", other))),
        };
        println!(
            "{}: seed {} done ({} nonzero edges)",
            method,
            seed,
            graph.as_slice().iter().filter(|&&v| v != 0.0).count()
        );
    }
    let summary = if scores.is_empty() {
        TrainSummary {
            method: method.to_string(),
            version: crate::VERSION.to_string(),
            config_digest: digest,
            seeds: seed_list,
            flow_only,
            auroc_mean: None,
            auroc_std: None,
            ap_mean: None,
            ap_std: None,
            per_seed: scores,
        }
    } else {
        let aurocs: Vec<f64> = scores.iter().map(|s| s.auroc).collect();
        let aps: Vec<f64> = scores.iter().map(|s| s.ap).collect();
        let (am, asd) = mean_std(&aurocs);
        let (pm, psd) = mean_std(&aps);
        TrainSummary {
            method: method.to_string(),
            version: crate::VERSION.to_string(),
            config_digest: digest,
            seeds: seed_list,
            flow_only,
            auroc_mean: Some(am),
            auroc_std: Some(asd),
            ap_mean: Some(pm),
            ap_std: Some(psd),
            per_seed: scores,
        }
    };
    write_json(&dir.join("summary.json"), &summary)?;
    if let (Some(am), Some(pm)) = (summary.auroc_mean, summary.ap_mean) {
        println!("summary: auroc_mean={:.4} ap_mean={:.4}", am, pm);
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct RfRunReport<'a> {
    method: &'a str,
    version: &'a str,
    config_digest: &'a str,
    seed: u64,
    structure: Option<StructureScore>,
    model: &'a OuModel,
    report: &'a RfReport,
}

/// Distributional metrics between a prediction and the ground truth.
fn eval_metrics(pred: &Mat, truth: &Mat, opts: &MetricOptions) -> Result<(f64, f64, f64, Vec<MetricReport>)> {
    let w = w2(pred, truth, opts)?;
    let m = mmd2(pred, truth)?;
    let e = energy_distance(pred, truth)?;
    let reports = vec![
        MetricReport::new("w2", w, pred.rows(), truth.rows(), opts),
        MetricReport::new("mmd2", m, pred.rows(), truth.rows(), opts),
        MetricReport::new("energy_distance", e, pred.rows(), truth.rows(), opts),
    ];
    Ok((w, m, e, reports))
}

#[derive(Debug, Serialize)]
struct HeldOutRow {
    fold: usize,
    held_out_t: usize,
    seed: u64,
    condition: String,
    method: String,
    w2: f64,
    mmd2: f64,
    ed: f64,
    metrics: Vec<MetricReport>,
}

#[derive(Debug, Serialize)]
struct LotoSummary {
    method: String,
    version: String,
    config_digest: String,
    folds: Vec<usize>,
    seeds: Vec<u64>,
    w2_mean: f64,
    mmd2_mean: f64,
    ed_mean: f64,
    null_w2_mean: f64,
    null_mmd2_mean: f64,
    null_ed_mean: f64,
}

fn rows_csv(rows: &[HeldOutRow], avg: &LotoSummary) -> String {
    let mut out = String::from("fold,held_out_t,seed,condition,method,w2,mmd2,ed\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.fold, r.held_out_t, r.seed, r.condition, r.method, r.w2, r.mmd2, r.ed
        ));
    }
    out.push_str(&format!(
        "avg,,,all,{},{},{},{}\n",
        avg.method, avg.w2_mean, avg.mmd2_mean, avg.ed_mean
    ));
    out.push_str(&format!(
        "avg,,,all,null,{},{},{}\n",
        avg.null_w2_mean, avg.null_mmd2_mean, avg.null_ed_mean
    ));
    out
}

/// Train with one interior timepoint withheld, roll the model from the
/// preceding marginal to the held-out time (half of the doubled segment),
/// and score against the held-out ground truth. The copy-previous-marginal
/// null is reported alongside for every fold.
pub fn cmd_loto(cfg: &Config) -> Result<()> {
    let dataset = load_or_generate(cfg)?;
    if dataset.timepoints < 3 {
        return Err(SfkError::Usage(format!(
            "loto needs at least 3 timepoints, dataset has {}",
            dataset.timepoints
        )));
    }
    let dir = out_dir(cfg);
    ensure_dir(&dir)?;
    let method = cfg.get_string("train", "method", "sf");
    let digest = cfg.digest();
    let seed_list = seeds(cfg, &[1, 2, 3])?;
    let mopts = metric_options(cfg)?;
    let rollout_steps = cfg.get_usize("eval", "rollout_steps", 100)?;
    let mut rows: Vec<HeldOutRow> = Vec::new();
    for k in 1..=dataset.timepoints - 2 {
        let fold_ds = dataset.without_timepoint(k)?;
        for &seed in &seed_list {
            let predictor = fit_predictor(&fold_ds, cfg, &method, seed)?;
            for cond in &dataset.conditions {
                let Some(start) = cond.marginals.iter().find(|m| m.timepoint == k - 1) else {
                    continue;
                };
                let Some(target) = cond.marginals.iter().find(|m| m.timepoint == k) else {
                    continue;
                };
                // In the fold's renumbered clock, t_{k-1} sits at segment
                // index k-1 and the held-out time at local 0.5 of the
                // doubled segment.
                let pred = predictor.rollout(
                    &start.samples,
                    k - 1,
                    0.5,
                    rollout_steps,
                    cond.knockout,
                )?;
                let (w, m, e, reports) = eval_metrics(&pred, &target.samples, &mopts)?;
                rows.push(HeldOutRow {
                    fold: k,
                    held_out_t: k,
                    seed,
                    condition: cond.name.clone(),
                    method: method.clone(),
                    w2: w,
                    mmd2: m,
                    ed: e,
                    metrics: reports,
                });
                let (w, m, e, reports) = eval_metrics(&start.samples, &target.samples, &mopts)?;
                rows.push(HeldOutRow {
                    fold: k,
                    held_out_t: k,
                    seed,
                    condition: cond.name.clone(),
                    method: "null".to_string(),
                    w2: w,
                    mmd2: m,
                    ed: e,
                    metrics: reports,
                });
            }
        }
        println!("loto: fold {} done", k);
    }
    let pick = |name: &str, f: fn(&HeldOutRow) -> f64| -> f64 {
        let vals: Vec<f64> = rows.iter().filter(|r| r.method == name).map(f).collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    let summary = LotoSummary {
        method: method.clone(),
        version: crate::VERSION.to_string(),
        config_digest: digest,
        folds: (1..=dataset.timepoints - 2).collect(),
        seeds: seed_list,
        w2_mean: pick(&method, |r| r.w2),
        mmd2_mean: pick(&method, |r| r.mmd2),
        ed_mean: pick(&method, |r| r.ed),
        null_w2_mean: pick("null", |r| r.w2),
        null_mmd2_mean: pick("null", |r| r.mmd2),
        null_ed_mean: pick("null", |r| r.ed),
    };
    write_text(&dir.join("loto.csv"), &rows_csv(&rows, &summary))?;
    write_json(&dir.join("loto.json"), &serde_json::json!({ "rows": rows, "summary": summary }))?;
    println!(
        "loto: {} w2_mean={:.4} vs null {:.4}",
        summary.method, summary.w2_mean, summary.null_w2_mean
    );
    Ok(())
}

/// Either a trained joint model or the fitted linear baseline, with a
/// common rollout surface for the evaluation harnesses.
enum Predictor {
    Sf(Model, usize),
    Rf(OuModel),
}

impl Predictor {
    fn rollout(
        &self,
        x0: &Mat,
        segment: usize,
        span: f64,
        steps: usize,
        knockout: Option<usize>,
    ) -> Result<Mat> {
        match self {
            Predictor::Sf(model, d) => {
                let mask = InterventionMask::from_knockout(*d, knockout)?;
                let cfg = RolloutConfig {
                    steps,
                    sigma: if model.flow_only { 0.0 } else { model.sigma },
                    local_span: (0.0, span),
                    ..RolloutConfig::default()
                };
                rollout_ode(&model.ngm, &model.score, x0, segment, &mask, &cfg)
            }
            Predictor::Rf(model) => {
                let mut prng = Prng::new(0);
                ou_rollout(model, x0, steps, span, 0.0, knockout, &mut prng)
            }
        }
    }
}

fn fit_predictor(dataset: &SnapshotDataset, cfg: &Config, method: &str, seed: u64) -> Result<Predictor> {
    match method {
        "sf" => {
            let config = train_config(cfg, seed)?;
            let (model, report) = train(dataset, &config)?;
            if let Some(reason) = &report.aborted {
                return Err(SfkError::Diverged(reason.clone()));
            }
            Ok(Predictor::Sf(model, dataset.d))
        }
        "rf" => {
            let opts = rf_options(cfg)?;
            let (model, _) = fit_reference(dataset, &opts)?;
            Ok(Predictor::Rf(model))
        }
        other => Err(SfkError::Usage(format!("unknown method '{}'", other))),
    }
}

#[derive(Debug, Serialize)]
struct LokoRow {
    held_out: String,
    seed: u64,
    role: String,
    condition: String,
    timepoint: usize,
    w2: f64,
    mmd2: f64,
    ed: f64,
    clamp_max: Option<f64>,
    metrics: Vec<MetricReport>,
}

#[derive(Debug, Serialize)]
struct LokoSummary {
    method: String,
    version: String,
    config_digest: String,
    held_out: Vec<String>,
    seeds: Vec<u64>,
    /// Final-timepoint W2 averaged over held-out conditions and seeds.
    held_out_final_w2_mean: f64,
    seen_final_w2_mean: f64,
    clamp_max: f64,
    isolation_ok: bool,
}

/// Train with one knockout condition entirely withheld, then roll out under
/// its mask from its own initial samples across all segments, scoring every
/// reached timepoint. Seen knockouts are rolled out with the same machinery
/// for reference.
pub fn cmd_loko(cfg: &Config) -> Result<()> {
    let dataset = load_or_generate(cfg)?;
    let knockout_names: Vec<String> = dataset
        .conditions
        .iter()
        .filter(|c| c.knockout.is_some())
        .map(|c| c.name.clone())
        .collect();
    if knockout_names.len() < 2 {
        return Err(SfkError::Usage(format!(
            "loko needs at least 2 knockout conditions, dataset has {}",
            knockout_names.len()
        )));
    }
    let holdouts: Vec<String> = match cfg.get("eval", "holdouts") {
        Some(raw) => raw.split(',').map(|s| s.trim().to_string()).collect(),
        None => knockout_names.iter().take(3).cloned().collect(),
    };
    for h in &holdouts {
        if dataset.condition(h).is_none() {
            return Err(SfkError::Usage(format!("held-out condition '{}' not in dataset", h)));
        }
    }
    let dir = out_dir(cfg);
    ensure_dir(&dir)?;
    let method = cfg.get_string("train", "method", "sf");
    let digest = cfg.digest();
    let seed_list = seeds(cfg, &[1, 2, 3])?;
    let mopts = metric_options(cfg)?;
    let rollout_steps = cfg.get_usize("eval", "rollout_steps", 100)?;
    let mut rows: Vec<LokoRow> = Vec::new();
    let mut isolation_ok = true;
    let mut clamp_worst = 0.0f64;
    for held in &holdouts {
        let train_ds = dataset.without_condition(held)?;
        for &seed in &seed_list {
            let predictor = match &method[..] {
                "sf" => {
                    let config = train_config(cfg, seed)?;
                    let (model, report) = train(&train_ds, &config)?;
                    if let Some(reason) = &report.aborted {
                        return Err(SfkError::Diverged(reason.clone()));
                    }
                    if report.used_marginals.iter().any(|(name, _)| name == held) {
                        isolation_ok = false;
                    }
                    Predictor::Sf(model, train_ds.d)
                }
                _ => fit_predictor(&train_ds, cfg, &method, seed)?,
            };
            for cond in &dataset.conditions {
                if cond.knockout.is_none() {
                    continue;
                }
                let role = if &cond.name == held { "held_out" } else { "seen" };
                let mut state = cond.marginals[0].samples.clone();
                for seg in 0..cond.marginals.len() - 1 {
                    state = predictor.rollout(&state, seg, 1.0, rollout_steps, cond.knockout)?;
                    let target = &cond.marginals[seg + 1];
                    let (w, m, e, reports) = eval_metrics(&state, &target.samples, &mopts)?;
                    let clamp = cond.knockout.map(|c| {
                        let mut worst = 0.0f64;
                        for i in 0..state.rows() {
                            worst = worst.max(state.get(i, c).abs());
                        }
                        worst
                    });
                    if role == "held_out" {
                        if let Some(c) = clamp {
                            clamp_worst = clamp_worst.max(c);
                        }
                    }
                    rows.push(LokoRow {
                        held_out: held.clone(),
                        seed,
                        role: role.to_string(),
                        condition: cond.name.clone(),
                        timepoint: target.timepoint,
                        w2: w,
                        mmd2: m,
                        ed: e,
                        clamp_max: clamp,
                        metrics: reports,
                    });
                }
            }
        }
        println!("loko: held-out {} done", held);
    }
    let final_t = dataset.timepoints - 1;
    let mean_of = |role: &str| -> f64 {
        let vals: Vec<f64> = rows
            .iter()
            .filter(|r| r.role == role && r.timepoint == final_t && r.condition == if role == "held_out" { r.held_out.clone() } else { r.condition.clone() })
            .map(|r| r.w2)
            .collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    };
    let summary = LokoSummary {
        method: method.clone(),
        version: crate::VERSION.to_string(),
        config_digest: digest,
        held_out: holdouts.clone(),
        seeds: seed_list,
        held_out_final_w2_mean: mean_of("held_out"),
        seen_final_w2_mean: mean_of("seen"),
        clamp_max: clamp_worst,
        isolation_ok,
    };
    let mut csv = String::from("held_out,seed,role,condition,timepoint,w2,mmd2,ed,clamp_max\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.held_out,
            r.seed,
            r.role,
            r.condition,
            r.timepoint,
            r.w2,
            r.mmd2,
            r.ed,
            r.clamp_max.map_or(String::new(), |v| v.to_string())
        ));
    }
    csv.push_str(&format!(
        "avg,,held_out,all,{},{},,,\n",
        final_t, summary.held_out_final_w2_mean
    ));
    write_text(&dir.join("loko.csv"), &csv)?;
    write_json(&dir.join("loko.json"), &serde_json::json!({ "rows": rows, "summary": summary }))?;
    println!(
        "loko: held_out_final_w2={:.4} seen_final_w2={:.4} clamp_max={:.4} isolation_ok={}",
        summary.held_out_final_w2_mean, summary.seen_final_w2_mean, summary.clamp_max, summary.isolation_ok
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StructureReport {
    pub auroc: f64,
    pub ap: f64,
    pub num_positives: usize,
    pub num_evaluated: usize,
    pub prevalence: f64,
    /// AP relative to the random-predictor baseline (prevalence).
    pub ap_ratio: f64,
    /// AUROC relative to the random-predictor baseline (0.5).
    pub auroc_ratio: f64,
}

/// Score a predicted graph CSV against a ground-truth CSV and report the
/// raw scores plus their ratios to a random predictor.
pub fn cmd_eval_structure(cfg: &Config) -> Result<()> {
    let graph_path = cfg
        .get("eval", "graph")
        .ok_or_else(|| SfkError::Usage("eval.graph must name the predicted graph CSV".to_string()))?;
    let truth_path = cfg
        .get("eval", "truth")
        .ok_or_else(|| SfkError::Usage("eval.truth must name the ground-truth CSV".to_string()))?;
    let pred = read_matrix_csv(Path::new(graph_path), None)?;
    let truth = read_matrix_csv(Path::new(truth_path), None)?;
    if pred.rows() != truth.rows() || pred.cols() != truth.cols() {
        return Err(SfkError::Usage(format!(
            "shape mismatch: graph {}x{} vs truth {}x{}",
            pred.rows(),
            pred.cols(),
            truth.rows(),
            truth.cols()
        )));
    }
    let s = structure_scores(&pred, &truth)?;
    let report = StructureReport {
        auroc: s.auroc,
        ap: s.ap,
        num_positives: s.num_positives,
        num_evaluated: s.num_evaluated,
        prevalence: s.prevalence(),
        ap_ratio: s.ap / s.prevalence(),
        auroc_ratio: s.auroc / 0.5,
    };
    let dir = out_dir(cfg);
    ensure_dir(&dir)?;
    write_json(&dir.join("structure.json"), &report)?;
    println!(
        "structure: auroc={:.4} ap={:.4} auroc_ratio={:.4} ap_ratio={:.4}",
        report.auroc, report.ap, report.auroc_ratio, report.ap_ratio
    );
    Ok(())
}

/// Entry point shared by the binary and tests.
pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(args) => cmd_generate(&load_config(args)?),
        Command::Train(args) => {
            let cfg = load_config(args)?;
            let method = cfg.get_string("train", "method", "sf");
            cmd_train(&cfg, &method)
        }
        Command::Rf(args) => cmd_train(&load_config(args)?, "rf"),
        Command::Loto(args) => cmd_loto(&load_config(args)?),
        Command::Loko(args) => cmd_loko(&load_config(args)?),
        Command::EvalStructure(args) => cmd_eval_structure(&load_config(args)?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parse_and_override() {
        let mut cfg = Config::parse("[train]\nsteps = 100\n# comment\n[data]\nd=4\n", "test").unwrap();
        assert_eq!(cfg.get_usize("train", "steps", 0).unwrap(), 100);
        assert_eq!(cfg.get_usize("data", "d", 0).unwrap(), 4);
        cfg.apply_set("train.steps=25").unwrap();
        assert_eq!(cfg.get_usize("train", "steps", 0).unwrap(), 25);
        assert!(cfg.apply_set("nodot").is_err());
    }

    #[test]
    fn config_parse_errors_carry_line() {
        match Config::parse("[ok]\nbroken line\n", "p") {
            Err(SfkError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn config_digest_stable_under_ordering() {
        let a = Config::parse("[b]\nx=1\n[a]\ny=2\n", "p").unwrap();
        let b = Config::parse("[a]\ny=2\n[b]\nx=1\n", "p").unwrap();
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn generator_params_validation() {
        let mut cfg = Config::default();
        cfg.set("data", "sparsity", "1.5");
        match generator_params(&cfg) {
            Err(SfkError::Usage(msg)) => assert!(msg.contains("sparsity")),
            other => panic!("{:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn list_parsing() {
        let mut cfg = Config::default();
        cfg.set("data", "knockouts", "2, 3,4");
        let ks: Vec<usize> = cfg.get_list("data", "knockouts", vec![]).unwrap();
        assert_eq!(ks, vec![2, 3, 4]);
        cfg.set("data", "knockouts", "");
        let ks: Vec<usize> = cfg.get_list("data", "knockouts", vec![9]).unwrap();
        assert!(ks.is_empty());
    }
}
